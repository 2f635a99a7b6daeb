import math

import numpy as np
import pytest

from app.services.fock_space import (
    CutoffInsufficientError,
    FockMode,
    SqueezeParams,
    annihilation,
    default_cutoff,
    effective_occupations,
    entangled_thermal_state,
    mode_moments,
    number_operator,
    thermal_state,
    two_mode_squeeze,
)


def test_annihilation_matrix_elements():
    b = annihilation(FockMode(3)).data
    np.testing.assert_allclose(np.diag(b, k=1), np.sqrt([1, 2, 3]))
    np.testing.assert_allclose((b.conj().T @ b).diagonal(), [0, 1, 2, 3])


def test_thermal_state_has_requested_occupation():
    mode = FockMode(60)
    rho = thermal_state(mode, 0.8)
    assert rho.is_density_matrix()
    assert rho.truncation_defect < 1e-10
    assert np.isclose(np.real(rho.expectation(number_operator(mode))), 0.8, atol=1e-8)


def test_thermal_state_with_small_cutoff_is_rejected():
    with pytest.raises(CutoffInsufficientError, match="cutoff-insufficient"):
        thermal_state(FockMode(2), 5.0)


def test_squeeze_parameters_validate_and_wrap_phase():
    with pytest.raises(ValueError):
        SqueezeParams(r=-0.1)
    zeta = SqueezeParams(r=0.5, psi=2 * math.pi + 0.25)
    assert np.isclose(zeta.psi, 0.25)


def test_squeezed_vacuum_moments_match_closed_form():
    r, psi = 0.3, 0.7
    modes = (FockMode(30), FockMode(30))
    state = entangled_thermal_state(modes, SqueezeParams(r, psi), 0.0, 0.0)
    moments = mode_moments(state, modes)
    expected = math.cosh(r) * math.sinh(r) * complex(math.cos(psi), math.sin(psi))
    assert abs(moments["b1_b2"] - expected) < 1e-8
    assert abs(moments["n1"] - math.sinh(r) ** 2) < 1e-8
    assert abs(moments["b1"]) < 1e-12
    assert abs(moments["b1_b2dag"]) < 1e-12


def test_two_mode_squeeze_rejects_too_small_cutoff():
    modes = (FockMode(3), FockMode(3))
    with pytest.raises(CutoffInsufficientError):
        two_mode_squeeze(modes, SqueezeParams(1.5, 0.0))


def test_modes_must_share_cutoff():
    with pytest.raises(ValueError):
        two_mode_squeeze((FockMode(4), FockMode(5)), SqueezeParams(0.1, 0.0))


def test_entangled_thermal_state_is_normalized():
    modes = (FockMode(25), FockMode(25))
    state = entangled_thermal_state(modes, SqueezeParams(0.2, 0.1), 0.3, 0.1)
    assert abs(state.trace() - 1.0) < 1e-12
    assert state.is_hermitian()
    assert state.min_eigenvalue() > -1e-10


def test_effective_occupations_without_squeezing_are_unchanged():
    assert effective_occupations(0.2, 0.5, 0.0) == (0.2, 0.5)


def test_default_cutoff_bounds_thermal_tail():
    n1, n2, r = 0.2, 0.5, 0.4
    cutoff = default_cutoff(n1, n2, r)
    assert cutoff >= 10
    for occupation in effective_occupations(n1, n2, r):
        assert FockMode(cutoff).tail_weight(occupation) <= 1e-10


def test_squeeze_defect_is_vacuum_population_on_top_level():
    modes = (FockMode(30), FockMode(30))
    squeeze = two_mode_squeeze(modes, SqueezeParams(0.3, 0.0))
    amplitudes = np.abs(squeeze.data[:, 0].reshape(31, 31)) ** 2
    expected = amplitudes[-1, :].sum() + amplitudes[:, -1].sum()
    assert squeeze.truncation_defect == pytest.approx(expected, rel=1e-9)


def test_entangled_thermal_defect_counts_thermal_leak():
    modes = (FockMode(20), FockMode(20))
    state = entangled_thermal_state(modes, SqueezeParams(0.4, 0.0), 0.3, 0.3)
    populations = np.real(np.diag(state.data)).reshape(21, 21)
    top = populations[-1, :].sum() + populations[:, -1].sum()
    assert top > 0
    assert state.truncation_defect >= top * (1 - 1e-6)


def test_entangled_thermal_rejects_squeezed_thermal_spill():
    modes = (FockMode(16), FockMode(16))
    with pytest.raises(CutoffInsufficientError, match="top Fock level"):
        entangled_thermal_state(modes, SqueezeParams(0.65, 0.0), 0.3, 0.3)
