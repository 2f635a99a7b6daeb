import numpy as np
import pytest
from scipy.integrate import solve_ivp

from app.services.operator_core import (
    HilbertDims,
    Operator,
    kron,
    projector,
    random_density_matrix,
    random_hermitian,
    sigma_minus,
    sigma_plus,
    sigma_z,
    zeros,
)
from app.services.gkls_engine import (
    DecompositionError,
    GKLSSpec,
    GKSBasis,
    Superoperator,
    build_liouvillian,
    compare_specs,
    decompose_generator,
    flow,
    global_dissipator,
    hamiltonian_superoperator,
    lamb_shift,
    local_gks_operators,
    propagate,
    specs_match,
    undaggered_to_daggered,
    unvec,
    vec,
)


def _amplitude_damping(gamma: float = 1.0, h: Operator = None) -> GKLSSpec:
    basis = GKSBasis.local((2,))
    kossakowski = np.zeros((3, 3), dtype=complex)
    kossakowski[basis.index(0, "sm"), basis.index(0, "sm")] = gamma
    return GKLSSpec(basis, h if h is not None else zeros((2,)), kossakowski)


def _random_psd(n: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return g @ g.conj().T / n


def test_vec_is_column_stacking():
    m = np.array([[1, 2], [3, 4]])
    np.testing.assert_array_equal(vec(m), [1, 3, 2, 4])
    np.testing.assert_array_equal(unvec(vec(m), 2), m)


def test_local_basis_is_orthonormal_and_traceless():
    for d in (2, 3):
        ops = local_gks_operators(d)
        assert len(ops) == d * d - 1
        stacked = np.array([op.data.reshape(-1) for _, op in ops])
        np.testing.assert_allclose(stacked.conj() @ stacked.T, np.eye(len(ops)), atol=1e-12)
        assert all(abs(op.trace()) < 1e-12 for _, op in ops)
    assert [label for label, _ in local_gks_operators(2)] == ["sm", "sp", "sz"]


def test_basis_rejects_duplicate_keys():
    basis = GKSBasis.local((2,))
    with pytest.raises(ValueError):
        GKSBasis(basis.dims, basis.ops + basis.ops[:1])


def test_hamiltonian_superoperator_is_commutator():
    rng = np.random.default_rng(2)
    h = random_hermitian(3, rng)
    rho = random_density_matrix(3, rng)
    applied = hamiltonian_superoperator(h).apply(rho)
    np.testing.assert_allclose(applied.data, -1j * (h.data @ rho.data - rho.data @ h.data), atol=1e-12)


def test_amplitude_damping_liouvillian():
    rng = np.random.default_rng(4)
    rho = random_density_matrix(2, rng)
    sm = sigma_minus().data
    anticommutator = sm.conj().T @ sm @ rho.data + rho.data @ sm.conj().T @ sm
    expected = 0.7 * (sm @ rho.data @ sm.conj().T - 0.5 * anticommutator)
    generator = build_liouvillian(_amplitude_damping(0.7))
    np.testing.assert_allclose(generator.apply(rho).data, expected, atol=1e-12)
    assert generator.trace_annihilation_defect() < 1e-12


def test_flow_decays_excited_population():
    generator = build_liouvillian(_amplitude_damping(1.0))
    excited = projector(2, 1)
    state = propagate(generator, excited, 0.5)
    assert np.isclose(np.real(state.data[1, 1]), np.exp(-0.5))
    np.testing.assert_allclose(flow(generator, 0.5).apply(excited).data, state.data)
    assert propagate(generator, excited, 0.0) is excited
    with pytest.raises(ValueError):
        propagate(generator, excited, np.nan)


def test_decomposition_recovers_single_qubit_spec():
    rng = np.random.default_rng(7)
    basis = GKSBasis.local((2,))
    h = random_hermitian(2, rng)
    h = h - Operator(h.dims, np.eye(2) * h.trace() / 2)
    spec = GKLSSpec(basis, h, _random_psd(3, rng))
    result = decompose_generator(build_liouvillian(spec), basis)
    assert result.residual < 1e-10
    assert specs_match(result.spec, spec, 1e-9)


def test_decomposition_recovers_cross_site_coefficients():
    rng = np.random.default_rng(13)
    basis = GKSBasis.local((2, 2))
    spec = GKLSSpec(basis, zeros((2, 2)), _random_psd(basis.size, rng))
    result = decompose_generator(build_liouvillian(spec), basis)
    np.testing.assert_allclose(result.spec.kossakowski, spec.kossakowski, atol=1e-9)
    assert result.condition_number < 1e12


def test_decomposition_rejects_trace_increasing_generator():
    with pytest.raises(DecompositionError):
        decompose_generator(Superoperator.identity((2,)), GKSBasis.local((2,)))


def test_spec_rejects_non_hermitian_kossakowski():
    basis = GKSBasis.local((2,))
    gamma = np.zeros((3, 3), dtype=complex)
    gamma[0, 1] = 1.0
    with pytest.raises(ValueError):
        GKLSSpec(basis, zeros((2,)), gamma)


def test_reindexing_preserves_the_liouvillian():
    rng = np.random.default_rng(21)
    basis = GKSBasis.local((2, 2))
    spec = GKLSSpec(basis, zeros((2, 2)), _random_psd(basis.size, rng))
    reordered = GKSBasis(basis.dims, tuple(reversed(basis.ops)))
    moved = spec.reindexed(reordered)
    assert (build_liouvillian(moved) - build_liouvillian(spec)).norm() < 1e-10
    assert compare_specs(moved.canonical(), spec).kossakowski_error < 1e-10


def test_undaggered_table_maps_to_daggered_kossakowski():
    basis = GKSBasis.local((2,))
    terms = [(0, sigma_minus()), (0, sigma_plus())]
    table = np.array([[0.0, 0.9], [0.1, 0.0]])
    gamma = undaggered_to_daggered(basis, terms, table)
    assert np.isclose(gamma[basis.index(0, "sm"), basis.index(0, "sm")], 0.9)
    assert np.isclose(gamma[basis.index(0, "sp"), basis.index(0, "sp")], 0.1)
    assert np.isclose(np.abs(gamma).sum(), 1.0)


def test_lamb_shift_plus_symmetric_form_equals_causal_form():
    rng = np.random.default_rng(17)
    basis = GKSBasis.local((2, 2))
    full = _random_psd(basis.size, rng)
    ops = basis.embedded_ops()
    rows = [a for a, e in enumerate(basis.ops) if e.site == 0]
    cols = [b for b, e in enumerate(basis.ops) if e.site == 1]
    local = np.zeros_like(full)
    for a in rows:
        for b in rows:
            local[a, b] = full[a, b]
    for a in cols:
        for b in cols:
            local[a, b] = full[a, b]
    block = full[np.ix_(rows, cols)]
    left = [ops[a] for a in rows]
    right = [ops[b] for b in cols]
    h_ls = lamb_shift(block, left, right)
    assert h_ls.is_hermitian()
    symmetric = build_liouvillian(GKLSSpec(basis, h_ls, full))
    causal = build_liouvillian(GKLSSpec(basis, zeros((2, 2)), local)) + global_dissipator(block, left, right)
    assert (symmetric - causal).norm() < 1e-10


def test_lamb_shift_of_emission_pair():
    sm, sp = sigma_minus(), sigma_plus()
    left = [kron(sm, Operator(HilbertDims((2,)), np.eye(2)))]
    right = [kron(Operator(HilbertDims((2,)), np.eye(2)), sm)]
    g = 0.4 + 0.3j
    h_ls = lamb_shift(np.array([[g]]), left, right)
    expected = (kron(sm, sp) * g - kron(sp, sm) * np.conj(g)) / 2j
    np.testing.assert_allclose(h_ls.data, expected.data, atol=1e-14)


def test_compare_specs_reports_hamiltonian_gap():
    plain = _amplitude_damping(1.0)
    driven = _amplitude_damping(1.0, sigma_z() * 0.5)
    result = compare_specs(driven, plain)
    assert np.isclose(result.hamiltonian_error, 0.5 * np.sqrt(2))
    assert result.kossakowski_error < 1e-12


def test_propagate_matches_adaptive_integrator():
    rng = np.random.default_rng(31)
    basis = GKSBasis.local((2,))
    spec = GKLSSpec(basis, random_hermitian(2, rng), _random_psd(3, rng))
    generator = build_liouvillian(spec)
    rho0 = random_density_matrix(2, rng)
    solution = solve_ivp(
        lambda _, y: generator.matrix @ y, (0.0, 0.8), vec(rho0.data), rtol=1e-10, atol=1e-12
    )
    integrated = unvec(solution.y[:, -1], 2)
    np.testing.assert_allclose(propagate(generator, rho0, 0.8).data, integrated, atol=1e-7)


def test_basis_union_keeps_shared_operators_once():
    full = GKSBasis.local((2, 2))
    first = full.subset([(0, "sm"), (1, "sp")])
    second = full.subset([(1, "sp"), (0, "sz")])
    joined = first.union(second)
    assert joined.keys == [(0, "sm"), (1, "sp"), (0, "sz")]
    with pytest.raises(ValueError):
        first.union(GKSBasis.local((2,)))
