import numpy as np
import pytest

from app.services.operator_core import (
    HilbertDims,
    kron,
    sigma_minus,
    sigma_plus,
    sigma_z,
)
from app.services.gkls_engine import GKSBasis, build_liouvillian, compare_specs
from app.services.collision_engine import AncillaPrep, StageKind, extract_generator
from app.services.model_library import (
    CascadeSpec,
    EntangledModelSpec,
    InteractionTerm,
    McmAncillaSpec,
    emission_pair_models,
    bell_like_entangler,
    build_cascade,
    build_composite,
    build_entangled,
    build_mcm_brick,
    build_single,
    compile_gkls_to_mcm,
    ground_qubit_prep,
    qubit_emission_terms,
    qubit_pair_state,
    random_gkls_target,
    slow_environment_scan,
    squeezed_closed_form,
    squeezed_example,
    thermal_qubit_prep,
)
from app.services.registry import OperatorRegistry


def test_thermal_ancilla_sets_emission_and_absorption_rates():
    build = build_single(gamma=2.0, prep=thermal_qubit_prep(0.25))
    spec = build.predicted
    assert spec.coefficient((0, "sm"), (0, "sm")) == pytest.approx(1.5)
    assert spec.coefficient((0, "sp"), (0, "sp")) == pytest.approx(0.5)
    assert abs(spec.coefficient((0, "sm"), (0, "sp"))) < 1e-15
    assert build.drift < 1e-15


def test_splittings_share_the_limit_generator():
    h_s = sigma_z() * 0.5
    joint = extract_generator(build_single(1.0, h_s=h_s, splitting="joint").schedule)
    trotter = extract_generator(build_single(1.0, h_s=h_s, splitting="system_first").schedule)
    assert (joint.superoperator - trotter.superoperator).norm() < 1e-6


def test_joint_splitting_needs_hamiltonian():
    with pytest.raises(ValueError):
        build_single(1.0, splitting="joint")


def test_mcm_brick_is_palindromic_and_matches_prediction():
    basis = GKSBasis.local((2, 2))
    spec = McmAncillaSpec((0, "sm"), (1, "sm"), 1.0, 0.5j)
    build = build_mcm_brick(basis, spec, 1.0)
    collisions = build.schedule.program.collisions()
    assert [s.targets[0] for s in collisions] == ["s0", "s1", "s0"]
    assert [s.fraction for s in collisions] == [0.5, 1.0, 0.5]
    expected = build.predicted.coefficient((0, "sm"), (1, "sm"))
    assert expected == pytest.approx(1.0 * np.conj(0.5j))
    report = extract_generator(build.schedule, basis=basis)
    assert compare_specs(report.spec, build.predicted).kossakowski_error < 1e-5
    assert compare_specs(report.spec, build.predicted).hamiltonian_error < 1e-5


def test_mcm_quartet_on_one_operator_collapses():
    basis = GKSBasis.local((2,))
    build = build_mcm_brick(basis, McmAncillaSpec((0, "sm"), (0, "sm"), 1.0, 1.0), 0.5)
    assert build.predicted.coefficient((0, "sm"), (0, "sm")) == pytest.approx(2.0)


def test_compiled_random_target_is_reproduced():
    rng = np.random.default_rng(20240101)
    basis = GKSBasis.from_labels((2, 2), [(0, "sm"), (0, "sp"), (1, "sm"), (1, "sp")])
    target = random_gkls_target(basis, rng)
    assert target.is_psd()
    build = compile_gkls_to_mcm(target)
    assert len(build.schedule.ancilla_names) == 4
    report = extract_generator(build.schedule)
    assert compare_specs(report.spec, target).kossakowski_relative < 1e-4


def test_compiler_rejects_indefinite_target():
    basis = GKSBasis.local((2,))
    target = random_gkls_target(basis, np.random.default_rng(1))
    indefinite = type(target)(basis, target.h_eff, -target.kossakowski)
    with pytest.raises(ValueError, match="not PSD"):
        compile_gkls_to_mcm(indefinite)


def test_cascade_lamb_shift_matches_pair_formula():
    l1, l2 = 1.0, 1j
    _, _, cascade = emission_pair_models(l1, l2)
    build = build_cascade(cascade, 0.8)
    sm, sp = sigma_minus(), sigma_plus()
    expected = (kron(sm, sp) * (0.8 * l1 * np.conj(l2)) - kron(sp, sm) * (0.8 * np.conj(l1) * l2)) / 2j
    np.testing.assert_allclose(build.lamb_shift.data, expected.data, atol=1e-14)
    causal = build.predicted_generator()
    assert (causal - build_liouvillian(build.predicted)).norm() < 1e-12


def test_cascade_extraction_reproduces_causal_form():
    terms = [InteractionTerm(m, sigma_minus(), sigma_plus(), label=f"s{m}") for m in range(3)]
    build = build_cascade(CascadeSpec(HilbertDims((2, 2, 2)), tuple(terms)), 1.0)
    report = extract_generator(build.schedule)
    assert (report.superoperator - build.raw_generator).norm() < 1e-5


def test_reversed_cascade_flips_the_sweep():
    terms = [InteractionTerm(m, sigma_minus(), sigma_plus()) for m in range(4)]
    spec = CascadeSpec(HilbertDims((2,) * 4), tuple(terms), reversed=True)
    build = build_cascade(spec, 1.0)
    assert [s.targets[0] for s in build.schedule.program.collisions()] == ["s3", "s2", "s1", "s0"]


def test_counter_hamiltonian_removes_lamb_shift():
    _, _, cascade = emission_pair_models()
    build = build_cascade(cascade, 1.0, counter_hamiltonian=True)
    assert build.notes == ("counter_hamiltonian",)
    assert build.schedule.program.stages[-1].kind == StageKind.SYSTEM_UNITARY
    report = extract_generator(build.schedule)
    assert compare_specs(report.spec, build.predicted).hamiltonian_error < 1e-5


def test_cascade_rejects_ancilla_with_nonzero_mean():
    prep = thermal_qubit_prep(0.2)
    terms = (InteractionTerm(0, sigma_minus(), sigma_z()),)
    with pytest.raises(ValueError, match="zero mean"):
        CascadeSpec(HilbertDims((2,)), terms, prep=prep)


def test_composite_dissipation_stays_local():
    term = InteractionTerm(0, sigma_minus(), sigma_plus())
    build = build_composite((2, 2), 0, [term], OperatorRegistry().resolve("exchange"), 1.0)
    report = extract_generator(build.schedule)
    assert compare_specs(report.spec, build.predicted).kossakowski_error < 1e-5
    local = GKSBasis.local((2, 2))
    extracted = report.spec.reindexed(local)
    cross = [
        abs(extracted.kossakowski[a, b])
        for a, ea in enumerate(local.ops)
        for b, eb in enumerate(local.ops)
        if ea.site != eb.site
    ]
    assert max(cross) < 1e-5


def test_composite_rejects_collisions_off_the_dissipating_site():
    term = InteractionTerm(1, sigma_minus(), sigma_plus())
    with pytest.raises(ValueError):
        build_composite((2, 2), 0, [term], None, 1.0)


def test_entangled_pair_coefficients_are_index_symmetric():
    spec = EntangledModelSpec(
        HilbertDims((2, 2)),
        tuple(qubit_emission_terms(2)),
        AncillaPrep(HilbertDims((2, 2)), kind="explicit", state=qubit_pair_state(1.0, 0.5)),
    )
    build = build_entangled(spec, 1.0)
    table = build.table
    assert table.symmetry_defect < 1e-12
    assert table.modulus_gap < 1e-12
    assert abs(table.entry("sm0^dag", "sm1^dag")) > 0.1
    assert build.notes == ()
    report = extract_generator(build.schedule)
    assert compare_specs(report.spec, build.predicted).kossakowski_error < 1e-5


def test_fast_entangler_prepares_bell_like_state():
    spec = EntangledModelSpec(
        HilbertDims((2, 2)), tuple(qubit_emission_terms(2)), ground_qubit_prep(2), bell_like_entangler()
    )
    build = build_entangled(spec, 1.0, mu=0.6)
    assert build.schedule.program.stages[0].kind == StageKind.ANCILLA_UNITARY
    cross = build.table.entry("sm0^dag", "sm1^dag")
    assert cross == pytest.approx(-1j * np.cos(0.6) * np.sin(0.6))
    report = extract_generator(build.schedule)
    assert compare_specs(report.spec, build.predicted).kossakowski_error < 1e-5


def test_squeezed_trace_form_matches_closed_form():
    example = squeezed_example(0.4, 0.7, 0.2, 0.5, 1.0)
    assert example.truncation_defect < 1e-6
    assert max(example.relative_errors.values()) < 1e-6
    assert compare_specs(example.build.predicted, example.closed_form_spec).kossakowski_relative < 1e-6


def test_squeezed_closed_form_detailed_balance_without_squeezing():
    rates = squeezed_closed_form(0.0, 0.0, 0.3, 0.6, 2.0)
    assert rates["down1"] == pytest.approx(2.0 * 1.3)
    assert rates["up2"] == pytest.approx(2.0 * 0.6)
    assert rates["cross"] == 0


def test_slow_environment_cross_ratio_shrinks_with_dt():
    dts = [0.0625 / 2 ** k for k in range(6)]
    scan = slow_environment_scan(1.0, dts)
    assert len(scan.rows) == 6
    assert scan.monotone
    assert all(row.max_local > 0.5 for row in scan.rows)


def test_mcm_brick_is_invariant_under_swapping_the_pair():
    basis = GKSBasis.local((2, 2))
    forward = build_mcm_brick(basis, McmAncillaSpec((0, "sm"), (1, "sm"), 1.0, 0.5j), 1.0)
    swapped = build_mcm_brick(basis, McmAncillaSpec((1, "sm"), (0, "sm"), 0.5j, 1.0), 1.0)
    np.testing.assert_allclose(forward.predicted.kossakowski, swapped.predicted.kossakowski, atol=1e-14)
    assert [s.targets[0] for s in swapped.schedule.program.collisions()] == ["s1", "s0", "s1"]
    first = extract_generator(forward.schedule, basis=basis)
    second = extract_generator(swapped.schedule, basis=basis)
    comparison = compare_specs(first.spec, second.spec)
    assert comparison.kossakowski_error < 1e-5
    assert comparison.hamiltonian_error < 1e-5
