import numpy as np
import pytest

from app.services.operator_core import (
    CapacityError,
    HermitianPropagator,
    HilbertDims,
    Operator,
    OperatorPayload,
    apply_local,
    basis_ket,
    embed,
    embed_local,
    expm,
    identity,
    kron,
    partial_trace,
    random_density_matrix,
    random_hermitian,
    sigma_minus,
    sigma_plus,
    sigma_x,
    sigma_z,
)


def test_sigma_minus_lowers_excited_to_ground():
    """Index 0 is the ground state."""
    lowered = sigma_minus().data @ basis_ket(2, 1)
    np.testing.assert_allclose(lowered, basis_ket(2, 0))
    np.testing.assert_allclose(sigma_plus().data, sigma_minus().dag().data)
    assert np.isclose(sigma_z().data[1, 1], -1.0)


def test_dims_reject_small_factors_and_oversized_products():
    with pytest.raises(ValueError):
        HilbertDims((2, 1))
    with pytest.raises(CapacityError):
        HilbertDims((2,) * 30)


def test_operator_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        Operator(HilbertDims((2, 2)), np.eye(3))


def test_kron_orders_first_factor_slowest():
    product = kron(sigma_x(), sigma_z())
    assert product.dims.as_list() == [2, 2]
    np.testing.assert_allclose(product.data, np.kron(sigma_x().data, sigma_z().data))


def test_partial_trace_recovers_product_factors():
    rng = np.random.default_rng(3)
    a = random_density_matrix(2, rng)
    b = random_density_matrix(3, rng)
    joint = kron(a, b)
    np.testing.assert_allclose(partial_trace(joint, [0]).data, a.data, atol=1e-12)
    np.testing.assert_allclose(partial_trace(joint, [1]).data, b.data, atol=1e-12)
    full = partial_trace(joint, [])
    assert full.dim == 1
    assert np.isclose(full.data[0, 0], 1.0)


def test_partial_trace_rejects_bad_indices():
    rho = kron(identity(2), identity(2))
    with pytest.raises(ValueError):
        partial_trace(rho, [2])


def test_embed_matches_kron_with_identity():
    op = sigma_x()
    dims = (2, 3, 2)
    expected = np.kron(np.kron(np.eye(2), np.eye(3)), op.data)
    np.testing.assert_allclose(embed_local(op, 2, dims).data, expected)


def test_embed_respects_target_order():
    pair = kron(sigma_minus(), sigma_z())
    forward = embed(pair, [0, 2], (2, 2, 2))
    swapped = embed(kron(sigma_z(), sigma_minus()), [2, 0], (2, 2, 2))
    np.testing.assert_allclose(forward.data, swapped.data)


def test_apply_local_agrees_with_embedded_matrix():
    rng = np.random.default_rng(11)
    dims = HilbertDims((2, 3, 2))
    local = random_hermitian(4, rng).data
    block = rng.normal(size=(dims.total, 5)) + 1j * rng.normal(size=(dims.total, 5))
    full = embed(Operator(HilbertDims((2, 2)), local), [2, 0], dims).data
    np.testing.assert_allclose(apply_local(local, [2, 0], dims, block), full @ block, atol=1e-12)


def test_expm_of_hermitian_generator_is_unitary():
    rng = np.random.default_rng(5)
    h = random_hermitian(4, rng)
    u = expm(h, -1j)
    assert u.is_unitary(1e-10)
    np.testing.assert_allclose(u.data, HermitianPropagator(h).matrix(1.0), atol=1e-10)


def test_expm_rejects_non_finite_entries():
    with pytest.raises(ValueError):
        expm(Operator(HilbertDims((2,)), np.array([[np.inf, 0], [0, 0]])))


def test_density_matrix_predicates():
    rng = np.random.default_rng(8)
    rho = random_density_matrix((2, 2), rng, rank=2)
    assert rho.is_density_matrix()
    assert rho.purity() < 1.0
    assert not (rho * 2.0).is_density_matrix()


def test_payload_round_trip_keeps_complex_entries():
    op = kron(sigma_minus(), Operator(HilbertDims((2,)), np.array([[0, -1j], [1j, 0]])))
    back = Operator.from_payload(op.to_payload())
    np.testing.assert_allclose(back.data, op.data)


def test_payload_rejects_wrong_shape():
    with pytest.raises(ValueError):
        OperatorPayload(dims=[2, 2], re=[[1.0, 0.0], [0.0, 1.0]])


def test_partial_trace_matches_index_sum_on_entangled_state():
    rng = np.random.default_rng(12)
    rho = random_density_matrix((2, 3, 2), rng)
    t = rho.data.reshape(2, 3, 2, 2, 3, 2)
    expected = np.zeros((4, 4), dtype=complex)
    for i in range(2):
        for k in range(2):
            for ip in range(2):
                for kp in range(2):
                    expected[2 * i + k, 2 * ip + kp] = sum(t[i, j, k, ip, j, kp] for j in range(3))
    reduced = partial_trace(rho, [2, 0])
    assert reduced.dims.as_list() == [2, 2]
    np.testing.assert_allclose(reduced.data, expected, atol=1e-12)


def test_expm_of_general_matrix_matches_taylor_series():
    rng = np.random.default_rng(6)
    a = 0.3 * (rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3)))
    series = np.eye(3, dtype=complex)
    term = np.eye(3, dtype=complex)
    for n in range(1, 30):
        term = term @ a / n
        series = series + term
    np.testing.assert_allclose(expm(Operator(HilbertDims((3,)), a)).data, series, atol=1e-12)


def test_kron_is_associative():
    rng = np.random.default_rng(23)
    a, b, c = (
        Operator(HilbertDims((d,)), rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)))
        for d in (2, 3, 2)
    )
    left = kron(kron(a, b), c)
    right = kron(a, kron(b, c))
    assert left.dims.as_list() == right.dims.as_list() == [2, 3, 2]
    assert np.linalg.norm(left.data - right.data) <= 1e-14 * np.linalg.norm(left.data)
