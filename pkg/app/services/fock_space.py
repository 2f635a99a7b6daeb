import math
import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from app.services.operator_core import (
    HilbertDims,
    Operator,
    expm,
    identity,
    kron,
)

logger = logging.getLogger(__name__)

TAIL_TOLERANCE = 1e-10
SQUEEZE_DEFECT_LIMIT = 1e-6
SPREAD_FACTOR = 10


class CutoffInsufficientError(ValueError):
    """Raised when a Fock truncation cannot hold the requested state."""


@dataclass(frozen=True)
class FockMode:
    """A bosonic mode truncated at photon number `cutoff`."""

    cutoff: int

    def __post_init__(self):
        if int(self.cutoff) < 1:
            raise ValueError(f"cutoff must be >= 1, got {self.cutoff}")
        object.__setattr__(self, "cutoff", int(self.cutoff))

    @property
    def dim(self) -> int:
        return self.cutoff + 1

    def tail_weight(self, mean_number: float) -> float:
        """Thermal weight above the cutoff, (N/(N+1))^(cutoff+1)."""
        if mean_number <= 0:
            return 0.0
        ratio = mean_number / (mean_number + 1.0)
        return ratio ** (self.cutoff + 1)

    def check_thermal(self, mean_number: float, tol: float = TAIL_TOLERANCE):
        tail = self.tail_weight(mean_number)
        if tail > tol:
            raise CutoffInsufficientError(
                f"cutoff-insufficient: thermal tail {tail:.3e} for N={mean_number} "
                f"exceeds {tol:.1e} at cutoff {self.cutoff}"
            )


@dataclass(frozen=True)
class SqueezeParams:
    r: float = 0.0
    psi: float = 0.0

    def __post_init__(self):
        if self.r < 0:
            raise ValueError(f"squeeze magnitude r must be non-negative, got {self.r}")
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "psi", float(self.psi) % (2 * math.pi))

    @property
    def zeta(self) -> complex:
        return self.r * complex(math.cos(self.psi), math.sin(self.psi))


@dataclass(frozen=True, eq=False)
class TruncatedOperator(Operator):
    """Operator produced in a truncated Fock space, with its truncation defect."""

    truncation_defect: float = 0.0


def annihilation(mode: FockMode) -> Operator:
    """Lowering operator with <n-1|b|n> = sqrt(n)."""
    data = np.diag(np.sqrt(np.arange(1, mode.dim)), k=1)
    return Operator(HilbertDims((mode.dim,)), data)


def number_operator(mode: FockMode) -> Operator:
    return Operator(HilbertDims((mode.dim,)), np.diag(np.arange(mode.dim, dtype=float)))


def thermal_state(mode: FockMode, mean_number: float) -> TruncatedOperator:
    """
    Diagonal thermal state with p_n proportional to (N/(N+1))^n, renormalized
    after truncation.

    Args:
        mode: Truncated mode
        mean_number: Mean photon number N >= 0

    Returns:
        TruncatedOperator carrying the dropped tail weight as its defect

    Raises:
        CutoffInsufficientError: If the tail above the cutoff exceeds 1e-10
    """
    if mean_number < 0:
        raise ValueError(f"mean photon number must be non-negative, got {mean_number}")
    mode.check_thermal(mean_number)
    populations = np.zeros(mode.dim)
    if mean_number == 0:
        populations[0] = 1.0
    else:
        ratio = mean_number / (mean_number + 1.0)
        populations = ratio ** np.arange(mode.dim)
        populations /= populations.sum()
    return TruncatedOperator(
        HilbertDims((mode.dim,)),
        np.diag(populations),
        truncation_defect=mode.tail_weight(mean_number),
    )


def _check_same_cutoff(modes: Tuple[FockMode, FockMode]):
    if len(modes) != 2:
        raise ValueError("exactly two modes are required")
    if modes[0].cutoff != modes[1].cutoff:
        raise ValueError(
            f"both modes must share the cutoff, got {modes[0].cutoff} and {modes[1].cutoff}"
        )


def two_mode_ladders(modes: Tuple[FockMode, FockMode]) -> Tuple[Operator, Operator]:
    """Returns (b1, b2) embedded on the two-mode space."""
    b = annihilation(modes[0])
    eye = identity(modes[0].dim)
    return kron(b, eye), kron(eye, annihilation(modes[1]))


def _edge_population(state_vector: np.ndarray, dim: int) -> float:
    amplitudes = np.abs(state_vector.reshape(dim, dim)) ** 2
    return float(amplitudes[-1, :].sum() + amplitudes[:, -1].sum())


def two_mode_squeeze(
    modes: Tuple[FockMode, FockMode], zeta: SqueezeParams
) -> TruncatedOperator:
    """
    Two-mode squeeze S(zeta) = exp(zeta b1^dag b2^dag - zeta^* b1 b2), built
    from the truncated generator.

    The truncation defect is the population S|00> places on the top Fock
    level of either mode.

    Raises:
        CutoffInsufficientError: If the truncation defect exceeds 1e-6
    """
    _check_same_cutoff(modes)
    b1, b2 = two_mode_ladders(modes)
    z = zeta.zeta
    generator = z * (b1.dag() @ b2.dag()) - z.conjugate() * (b1 @ b2)
    squeeze = expm(generator)
    vacuum = np.zeros(squeeze.dim, dtype=np.complex128)
    vacuum[0] = 1.0
    defect = _edge_population(squeeze.data @ vacuum, modes[0].dim)
    if defect > SQUEEZE_DEFECT_LIMIT:
        raise CutoffInsufficientError(
            f"cutoff-insufficient: squeeze defect {defect:.3e} at r={zeta.r}, "
            f"cutoff {modes[0].cutoff}"
        )
    return TruncatedOperator(squeeze.dims, squeeze.data, truncation_defect=defect)


def entangled_thermal_state(
    modes: Tuple[FockMode, FockMode],
    zeta: SqueezeParams,
    n1: float,
    n2: float,
) -> TruncatedOperator:
    """
    Two-mode squeezed thermal state S(zeta) (rho_th(N1) x rho_th(N2)) S(zeta)^dag.

    Args:
        modes: The two truncated modes (same cutoff)
        zeta: Squeeze parameters
        n1: Mean photon number of mode 1 before squeezing
        n2: Mean photon number of mode 2 before squeezing

    Returns:
        Hermitian, unit-trace state; its truncation defect also counts the
        population the squeezed thermal state places on the top Fock level

    Raises:
        CutoffInsufficientError: If that population exceeds 1e-6
    """
    _check_same_cutoff(modes)
    rho1 = thermal_state(modes[0], n1)
    rho2 = thermal_state(modes[1], n2)
    product = kron(rho1, rho2)
    if zeta.r == 0:
        state = product
        defect = max(rho1.truncation_defect, rho2.truncation_defect)
    else:
        squeeze = two_mode_squeeze(modes, zeta)
        state = (squeeze @ product @ squeeze.dag()).hermitized()
        dim = modes[0].dim
        populations = np.real(np.diag(state.data)).reshape(dim, dim)
        leak = float(populations[-1, :].sum() + populations[:, -1].sum())
        if leak > SQUEEZE_DEFECT_LIMIT:
            raise CutoffInsufficientError(
                f"cutoff-insufficient: squeezed thermal state puts {leak:.3e} on the top "
                f"Fock level at r={zeta.r}, N=({n1}, {n2}), cutoff {modes[0].cutoff}"
            )
        defect = max(
            squeeze.truncation_defect, rho1.truncation_defect, rho2.truncation_defect, leak
        )
    data = state.data / np.real(np.trace(state.data))
    return TruncatedOperator(state.dims, data, truncation_defect=defect)


def effective_occupations(n1: float, n2: float, r: float) -> Tuple[float, float]:
    """Marginal mean photon numbers of the two squeezed modes."""
    c2 = math.cosh(r) ** 2
    s2 = math.sinh(r) ** 2
    return c2 * n1 + s2 * (n2 + 1.0), c2 * n2 + s2 * (n1 + 1.0)


def default_cutoff(n1: float, n2: float, r: float, tol: float = TAIL_TOLERANCE) -> int:
    """
    Smallest cutoff whose thermal tail for the squeezed marginals is <= tol
    and which is at least 10 * max(1, sinh^2 r).
    """
    spread = math.ceil(SPREAD_FACTOR * max(1.0, math.sinh(r) ** 2))
    cutoff = spread
    for occupation in effective_occupations(n1, n2, r):
        if occupation <= 0:
            continue
        ratio = occupation / (occupation + 1.0)
        needed = math.ceil(math.log(tol) / math.log(ratio)) - 1
        cutoff = max(cutoff, needed)
    logger.info(f"Selected Fock cutoff {cutoff} for N1={n1}, N2={n2}, r={r}")
    return cutoff


def mode_moments(rho: Operator, modes: Tuple[FockMode, FockMode]) -> Dict[str, complex]:
    """
    Moments of a two-mode state that decide the collision coefficients.

    Returns:
        Dict with b1_b2dag, b1_sq, b2_sq, b1, b2, b1_b2, n1, n2
    """
    b1, b2 = two_mode_ladders(modes)
    return {
        "b1_b2dag": rho.expectation(b1 @ b2.dag()),
        "b1_sq": rho.expectation(b1 @ b1),
        "b2_sq": rho.expectation(b2 @ b2),
        "b1": rho.expectation(b1),
        "b2": rho.expectation(b2),
        "b1_b2": rho.expectation(b1 @ b2),
        "n1": rho.expectation(b1.dag() @ b1),
        "n2": rho.expectation(b2.dag() @ b2),
    }
