import os
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, Field
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score

from app.services.operator_core import (
    STRUCTURAL_TOL,
    HermitianPropagator,
    HilbertDims,
    Operator,
    OperatorPayload,
    apply_local,
    as_dims,
    embed,
    expm,
    kron,
    partial_trace,
)
from app.services.gkls_engine import (
    GKLSSpec,
    GKSBasis,
    Superoperator,
    decompose_generator,
)

logger = logging.getLogger(__name__)

DEFAULT_WORKERS = int(os.environ.get("COLLIDER_WORKERS", "1"))
DEFAULT_DT_EXPONENTS = tuple(range(4, 11))
DRIFT_TOLERANCE = 1e-10
MIN_ORDER_R2 = 0.95
KRAUS_WEIGHT_FLOOR = 1e-14


class ScheduleError(ValueError):
    """Raised for malformed schedules and timesteps outside the perturbative regime."""


class Coupling(str, Enum):
    INTERACTION = "interaction"
    SYSTEM = "system"
    ENVIRONMENT = "environment"


class StageKind(str, Enum):
    ANCILLA_UNITARY = "ancilla_unitary"
    COLLISION = "collision"
    SYSTEM_UNITARY = "system_unitary"


@dataclass(frozen=True)
class ScalingRule:
    """
    Binds coupling strengths to the timestep.

    g_I = sqrt(gamma / dt), g_S fixed, and g_E = mu / dt in the fast
    environment regime or kappa * dt^(-s) in the slow one.
    """

    gamma: float = 1.0
    g_s: float = 1.0
    mu: float = 0.0
    regime: str = "fast"
    kappa: float = 1.0
    slow_exponent: float = 0.5

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.regime not in ("fast", "slow"):
            raise ValueError(f"regime must be 'fast' or 'slow', got {self.regime!r}")
        if not 0 < self.slow_exponent < 1:
            raise ValueError(f"slow_exponent must lie in (0, 1), got {self.slow_exponent}")

    def g_i(self, dt: float) -> float:
        return math.sqrt(self.gamma / dt)

    def g_e(self, dt: float) -> float:
        if self.regime == "fast":
            return self.mu / dt
        return self.kappa * dt ** (-self.slow_exponent)

    def coupling(self, kind: Coupling, dt: float) -> float:
        if kind == Coupling.INTERACTION:
            return self.g_i(dt)
        if kind == Coupling.SYSTEM:
            return self.g_s
        return self.g_e(dt)

    def angle(self, kind: Coupling, dt: float, fraction: float = 1.0) -> float:
        return self.coupling(kind, dt) * fraction * dt

    def to_dict(self) -> Dict[str, Any]:
        return {
            "gamma": self.gamma,
            "g_s": self.g_s,
            "mu": self.mu,
            "regime": self.regime,
            "kappa": self.kappa,
            "slow_exponent": self.slow_exponent,
        }


@dataclass(frozen=True)
class Stage:
    """One gate of a timestep: exp(-i sum_t g_t(dt) H_t fraction dt) on named factors."""

    kind: StageKind
    targets: Tuple[str, ...]
    terms: Tuple[Tuple[Coupling, str], ...]
    fraction: float = 1.0
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", StageKind(self.kind))
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(
            self, "terms", tuple((Coupling(c), str(g)) for c, g in self.terms)
        )
        if not self.terms:
            raise ValueError("A stage needs at least one generator term")
        if self.fraction <= 0:
            raise ValueError(f"duration fraction must be positive, got {self.fraction}")

    @property
    def generator(self) -> str:
        return "+".join(g for _, g in self.terms)


@dataclass(frozen=True)
class TimestepProgram:
    stages: Tuple[Stage, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    def collisions(self) -> List[Stage]:
        return [s for s in self.stages if s.kind == StageKind.COLLISION]


@dataclass(frozen=True, eq=False)
class AncillaPrep:
    """
    Fresh ancilla state prepared at every timestep.

    kind is one of: ground (product of |0><0|), entangled (U_E(mu) applied to
    the ground state with U_E = exp(-i mu H_E)), explicit (a given density
    matrix) or mixture (weighted sum of other preparations).
    """

    dims: HilbertDims
    kind: str = "ground"
    state: Optional[Operator] = None
    entangler: Optional[Operator] = None
    mu: float = 0.0
    components: Tuple[Tuple[float, "AncillaPrep"], ...] = ()
    _rho: Optional[Operator] = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "dims", as_dims(self.dims))
        object.__setattr__(self, "components", tuple(self.components))
        rho = self._build()
        if rho.dims != self.dims:
            raise ValueError(
                f"Ancilla state dims {rho.dims.as_list()} do not match {self.dims.as_list()}"
            )
        if not rho.is_density_matrix(STRUCTURAL_TOL):
            raise ValueError(
                f"Ancilla state is not a density matrix (min eigenvalue {rho.min_eigenvalue():.3e}, "
                f"trace {rho.trace():.6f})"
            )
        object.__setattr__(self, "_rho", rho)

    def _ground(self) -> Operator:
        vec = np.zeros(self.dims.total, dtype=np.complex128)
        vec[0] = 1.0
        return Operator(self.dims, np.outer(vec, vec))

    def _build(self) -> Operator:
        if self.kind == "ground":
            return self._ground()
        if self.kind == "entangled":
            if self.entangler is None:
                raise ValueError("entangled preparation requires an entangler H_E")
            unitary = HermitianPropagator(self.entangler).at(self.mu)
            return unitary @ self._ground() @ unitary.dag()
        if self.kind == "explicit":
            if self.state is None:
                raise ValueError("explicit preparation requires a state")
            return self.state
        if self.kind == "mixture":
            if not self.components:
                raise ValueError("mixture preparation requires components")
            weights = np.array([w for w, _ in self.components], dtype=float)
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
                raise ValueError(f"mixture weights must be non-negative and sum to 1, got {weights.tolist()}")
            total = np.zeros((self.dims.total, self.dims.total), dtype=np.complex128)
            for w, prep in self.components:
                total += w * prep.state_operator().data
            return Operator(self.dims, total)
        raise ValueError(f"Unknown ancilla preparation {self.kind!r}")

    def state_operator(self) -> Operator:
        return self._rho


@dataclass(frozen=True, eq=False)
class CollisionSchedule:
    """
    One timestep map: system x fresh ancillas, stages in application order,
    ancillas traced out. System factors come first in the joint layout.
    """

    system_dims: HilbertDims
    prep: AncillaPrep
    program: TimestepProgram
    generators: Dict[str, Operator]
    scaling: ScalingRule
    ancilla_names: Tuple[str, ...] = ()
    system_names: Tuple[str, ...] = ()
    name: str = ""
    _propagators: Dict[str, HermitianPropagator] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        system_dims = as_dims(self.system_dims)
        object.__setattr__(self, "system_dims", system_dims)
        if not self.system_names:
            object.__setattr__(
                self, "system_names", tuple(f"s{i}" for i in range(len(system_dims)))
            )
        if not self.ancilla_names:
            object.__setattr__(
                self, "ancilla_names", tuple(f"e{i}" for i in range(len(self.prep.dims)))
            )
        object.__setattr__(self, "generators", dict(self.generators))
        problems = self.validate()
        if problems:
            raise ScheduleError("; ".join(problems))
        object.__setattr__(
            self,
            "_propagators",
            {label: HermitianPropagator(op) for label, op in self.generators.items()},
        )

    @property
    def factor_names(self) -> Tuple[str, ...]:
        return tuple(self.system_names) + tuple(self.ancilla_names)

    @property
    def full_dims(self) -> HilbertDims:
        return self.system_dims + self.prep.dims

    @property
    def n_system(self) -> int:
        return len(self.system_dims)

    def factor_index(self, name: str) -> int:
        return self.factor_names.index(name)

    def validate(self) -> List[str]:
        """Returns every structural problem found; empty when the schedule is valid."""
        problems = []
        names = self.factor_names
        if len(set(names)) != len(names):
            problems.append(f"factor names are not unique: {list(names)}")
        if len(self.ancilla_names) != len(self.prep.dims):
            problems.append(
                f"{len(self.ancilla_names)} ancilla names for {len(self.prep.dims)} ancilla factors"
            )
            return problems
        dims = self.full_dims
        system = set(self.system_names)
        for i, stage in enumerate(self.program.stages):
            unknown = [t for t in stage.targets if t not in names]
            if unknown:
                problems.append(f"stage {i}: unknown targets {unknown}")
                continue
            if len(set(stage.targets)) != len(stage.targets):
                problems.append(f"stage {i}: repeated targets {list(stage.targets)}")
                continue
            on_system = [t for t in stage.targets if t in system]
            if stage.kind == StageKind.SYSTEM_UNITARY and len(on_system) != len(stage.targets):
                problems.append(f"stage {i}: system unitary touches ancilla factors")
            if stage.kind == StageKind.ANCILLA_UNITARY and on_system:
                problems.append(f"stage {i}: ancilla unitary touches system factors")
            expected = [dims[names.index(t)] for t in stage.targets]
            for _, label in stage.terms:
                op = self.generators.get(label)
                if op is None:
                    problems.append(f"stage {i}: generator {label!r} is not registered")
                elif op.dims.as_list() != expected:
                    problems.append(
                        f"stage {i}: generator {label!r} has dims {op.dims.as_list()}, "
                        f"targets need {expected}"
                    )
                elif not op.is_hermitian(STRUCTURAL_TOL):
                    problems.append(f"stage {i}: generator {label!r} is not Hermitian")
        return problems

    def has_interaction(self) -> bool:
        return any(
            c == Coupling.INTERACTION for s in self.program.stages for c, _ in s.terms
        )

    def stage_unitary(self, stage: Stage, dt: float) -> NDArray:
        """Instantiates one stage at timestep dt."""
        if len(stage.terms) == 1:
            coupling, label = stage.terms[0]
            theta = self.scaling.angle(coupling, dt, stage.fraction)
            return self._propagators[label].matrix(theta)
        total = sum(
            self.scaling.angle(c, dt, stage.fraction) * self.generators[label].data
            for c, label in stage.terms
        )
        generator = Operator(self.generators[stage.terms[0][1]].dims, total)
        return expm(generator, -1j).data

    def instantiate(self, dt: float) -> List[Tuple[List[int], NDArray]]:
        """
        Stage unitaries at dt, in application order, with their factor indices.

        Raises:
            ScheduleError: If dt is not positive or g_I dt >= 1
        """
        if not np.isfinite(dt) or dt <= 0:
            raise ScheduleError(f"timestep must be positive and finite, got {dt}")
        if self.has_interaction():
            bound = self.scaling.g_i(dt) * dt
            if not np.isfinite(bound) or bound >= 1.0:
                raise ScheduleError(
                    f"g_I*dt = {bound:.3e} leaves the perturbative regime (must stay < 1)"
                )
        units = []
        for stage in self.program.stages:
            u = self.stage_unitary(stage, dt)
            defect = np.linalg.norm(u.conj().T @ u - np.eye(u.shape[0]))
            if defect > STRUCTURAL_TOL:
                raise ScheduleError(f"stage {stage.label or stage.generator} is not unitary ({defect:.3e})")
            units.append(([self.factor_index(t) for t in stage.targets], u))
        return units


def step_map(schedule: CollisionSchedule, rho_s: Operator, dt: float) -> Operator:
    """
    One collision: Tr_E[U (rho_S x rho_E) U^dag] with the stage unitaries
    instantiated at dt.

    Args:
        schedule: Collision schedule
        rho_s: System state
        dt: Timestep

    Returns:
        System state after the timestep
    """
    if rho_s.dims != schedule.system_dims:
        raise ScheduleError(
            f"state dims {rho_s.dims.as_list()} do not match system dims "
            f"{schedule.system_dims.as_list()}"
        )
    dims = schedule.full_dims
    state = kron(rho_s, schedule.prep.state_operator()).data
    for targets, unitary in schedule.instantiate(dt):
        state = apply_local(unitary, targets, dims, state)
        state = apply_local(unitary, targets, dims, state.conj().T).conj().T
    return partial_trace(Operator(dims, state), range(schedule.n_system))


def compile_kraus(
    schedule: CollisionSchedule, dt: float, weight_floor: float = KRAUS_WEIGHT_FLOOR
) -> NDArray:
    """
    Kraus operators of the timestep map, K_{l,k} = sqrt(w_k) <l| U |e_k>,
    from the eigendecomposition of the ancilla state.

    Returns:
        Array of shape (n_kraus, D_S, D_S)
    """
    units = schedule.instantiate(dt)
    rho_e = schedule.prep.state_operator().data
    weights, vectors = np.linalg.eigh(0.5 * (rho_e + rho_e.conj().T))
    keep = weights > weight_floor
    kept = weights[keep] / weights[keep].sum()
    columns = vectors[:, keep] * np.sqrt(kept)
    d_s = schedule.system_dims.total
    d_e = rho_e.shape[0]
    rank = columns.shape[1]
    block = np.kron(np.eye(d_s), columns)
    dims = schedule.full_dims
    for targets, unitary in units:
        block = apply_local(unitary, targets, dims, block)
    tensor = block.reshape(d_s, d_e, d_s, rank)
    return tensor.transpose(1, 3, 0, 2).reshape(d_e * rank, d_s, d_s)


def kraus_to_superoperator(dims: HilbertDims, kraus: NDArray) -> Superoperator:
    d = dims.total
    matrix = np.einsum("ntq,nsp->tsqp", kraus.conj(), kraus).reshape(d * d, d * d)
    return Superoperator(dims, matrix)


def linearize_map(schedule: CollisionSchedule, dt: float) -> Superoperator:
    """Matrix of the timestep map acting on column-stacked system states."""
    return kraus_to_superoperator(schedule.system_dims, compile_kraus(schedule, dt))


def run_trajectory(
    schedule: CollisionSchedule, rho0: Operator, dt: float, n_steps: int
) -> List[Operator]:
    """
    Repeated collisions with fresh ancillas.

    Returns:
        n_steps + 1 states, starting with rho0
    """
    if n_steps < 0:
        raise ValueError(f"n_steps must be non-negative, got {n_steps}")
    states = [rho0]
    if n_steps == 0:
        return states
    channel = linearize_map(schedule, dt)
    for _ in range(n_steps):
        states.append(channel.apply(states[-1]))
    return states


def mean_field_drift(schedule: CollisionSchedule, dt: float = 1.0) -> float:
    """
    Largest norm of Tr_E[H (I x rho_E)] over the interaction terms, with the
    ancilla state seen by each collision. Nonzero values produce a first-order
    drift that diverges in the small-timestep limit.

    The ancilla state is the prepared one, advanced only through
    ancilla-unitary stages; ancilla states left behind by earlier collisions
    in the same timestep are not rechecked.
    """
    names = schedule.factor_names
    n_sys = schedule.n_system
    ancilla_dims = schedule.prep.dims
    rho_e = schedule.prep.state_operator()
    drift = 0.0
    for stage in schedule.program.stages:
        if stage.kind == StageKind.ANCILLA_UNITARY:
            if len(ancilla_dims) == 0:
                continue
            targets = [names.index(t) - n_sys for t in stage.targets]
            unitary = schedule.stage_unitary(stage, dt)
            data = apply_local(unitary, targets, ancilla_dims, rho_e.data)
            data = apply_local(unitary, targets, ancilla_dims, data.conj().T).conj().T
            rho_e = Operator(ancilla_dims, data)
            continue
        positions = [i for i, t in enumerate(stage.targets) if names.index(t) >= n_sys]
        if not positions:
            continue
        ancilla_factors = [names.index(stage.targets[i]) - n_sys for i in positions]
        order = sorted(range(len(positions)), key=lambda i: ancilla_factors[i])
        marginal = partial_trace(rho_e, ancilla_factors)
        local_dims = [schedule.full_dims[names.index(t)] for t in stage.targets]
        system_positions = [i for i in range(len(stage.targets)) if i not in positions]
        weighted = embed(marginal, [positions[i] for i in order], local_dims)
        for coupling, label in stage.terms:
            if coupling != Coupling.INTERACTION:
                continue
            reduced = partial_trace(schedule.generators[label] @ weighted, system_positions)
            drift = max(drift, reduced.norm())
    return drift


def default_dt_sequence(gamma: float) -> List[float]:
    """gamma * dt in {2^-4, ..., 2^-10}; plain powers of two when gamma is zero."""
    scale = gamma if gamma > 0 else 1.0
    return [2.0 ** -k / scale for k in DEFAULT_DT_EXPONENTS]


def check_dt_sequence(dt_sequence: Sequence[float]) -> Optional[float]:
    """
    Validates a strictly decreasing timestep sequence of at least 3 values.

    Returns:
        The common reduction ratio when the sequence is geometric, else None
    """
    dts = [float(dt) for dt in dt_sequence]
    if len(dts) < 3:
        raise ValueError(f"dt_sequence needs at least 3 values, got {len(dts)}")
    if any(not np.isfinite(dt) or dt <= 0 for dt in dts):
        raise ValueError("dt_sequence entries must be positive and finite")
    if any(b >= a for a, b in zip(dts, dts[1:])):
        raise ValueError("dt_sequence must be strictly decreasing")
    ratios = [a / b for a, b in zip(dts, dts[1:])]
    if max(ratios) - min(ratios) > 1e-9 * ratios[0]:
        return None
    return ratios[0]


def richardson_extrapolate(
    values: Sequence[NDArray],
    p: int = 1,
    r: float = 2.0,
    steps: Optional[Sequence[float]] = None,
) -> NDArray:
    """
    Richardson table on approximations ordered from the largest step to the
    smallest.

    With `steps` the table is the Neville recursion in h^p for arbitrary
    decreasing steps; without it the steps are taken to shrink by `r`.

    Args:
        values: Approximations ordered from the largest step to the smallest
        p: Order of the leading error term
        r: Step-size reduction factor (geometric sequences)
        steps: Step sizes matching `values`

    Returns:
        Extrapolated value
    """
    n = len(values)
    if n < 2:
        raise ValueError("richardson_extrapolate requires at least two values")
    if steps is not None and len(steps) != n:
        raise ValueError(f"richardson_extrapolate got {n} values but {len(steps)} steps")
    table = [np.asarray(v, dtype=np.complex128) for v in values]
    if steps is None:
        for j in range(1, n):
            factor = r ** (p * j)
            for k in range(n - 1, j - 1, -1):
                table[k] = (factor * table[k] - table[k - 1]) / (factor - 1.0)
        return table[-1]
    x = [float(h) ** p for h in steps]
    for j in range(1, n):
        for k in range(n - 1, j - 1, -1):
            table[k] = table[k] + (table[k] - table[k - 1]) * x[k] / (x[k - j] - x[k])
    return table[-1]


def fit_convergence_order(
    dts: Sequence[float], deviations: Sequence[float]
) -> Tuple[Optional[float], Optional[float]]:
    """
    Slope and R^2 of log(deviation) against log(dt), over positive deviations.

    Returns:
        (order, r2), or (None, None) with fewer than two usable points
    """
    pairs = [(dt, dev) for dt, dev in zip(dts, deviations) if dev > 0]
    if len(pairs) < 2:
        return None, None
    x = np.log([[dt] for dt, _ in pairs])
    y = np.log([dev for _, dev in pairs])
    model = LinearRegression().fit(x, y)
    r2 = float(r2_score(y, model.predict(x))) if len(pairs) > 2 else 1.0
    return float(model.coef_[0]), r2


@dataclass(frozen=True)
class ExtractionRow:
    dt: float
    frobenius_deviation: float
    trace_defect: float
    min_choi_eig: float


@dataclass(frozen=True, eq=False)
class ExtractionReport:
    superoperator: Superoperator
    spec: GKLSSpec
    residual: float
    rows: Tuple[ExtractionRow, ...]
    fitted_order: Optional[float]
    fit_r2: Optional[float]
    drift: float
    flags: Tuple[str, ...] = ()
    generators: Tuple[Superoperator, ...] = ()

    CSV_COLUMNS = ("dt", "frobenius_deviation", "trace_defect", "min_choi_eig")

    def csv_rows(self) -> List[List[float]]:
        return [[r.dt, r.frobenius_deviation, r.trace_defect, r.min_choi_eig] for r in self.rows]

    def to_summary(self) -> Dict[str, Any]:
        return {
            "residual": self.residual,
            "fitted_order": self.fitted_order,
            "fit_r2": self.fit_r2,
            "drift": self.drift,
            "flags": list(self.flags),
            "spec": self.spec.to_payload().model_dump(),
        }


def _finite_difference_generator(schedule: CollisionSchedule, dt: float) -> Tuple[Superoperator, Superoperator]:
    channel = linearize_map(schedule, dt)
    identity = Superoperator.identity(schedule.system_dims)
    return channel, (channel - identity) * (1.0 / dt)


def extract_generator(
    schedule: CollisionSchedule,
    dt_sequence: Optional[Sequence[float]] = None,
    basis: Optional[GKSBasis] = None,
    max_workers: Optional[int] = None,
) -> ExtractionReport:
    """
    Recovers the generator a schedule induces as dt -> 0.

    Each dt yields L_dt = (Phi_dt - id) / dt; the sequence is Richardson
    extrapolated assuming a first-order leading error, then decomposed into
    Hamiltonian and Kossakowski parts.

    Args:
        schedule: Collision schedule
        dt_sequence: Strictly decreasing timesteps (default gamma*dt = 2^-4..2^-10)
        basis: GKS basis for the decomposition (default: full local basis)
        max_workers: Threads used to evaluate the timesteps

    Returns:
        ExtractionReport; non-monotone deviations and poor order fits are flagged
    """
    dts = list(dt_sequence) if dt_sequence is not None else default_dt_sequence(schedule.scaling.gamma)
    ratio = check_dt_sequence(dts)
    basis = basis or GKSBasis.local(schedule.system_dims)
    workers = max_workers or DEFAULT_WORKERS

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            evaluated = list(pool.map(lambda dt: _finite_difference_generator(schedule, dt), dts))
    else:
        evaluated = [_finite_difference_generator(schedule, dt) for dt in dts]

    channels = [c for c, _ in evaluated]
    generators = [g for _, g in evaluated]
    extrapolated = Superoperator(
        schedule.system_dims,
        richardson_extrapolate(
            [g.matrix for g in generators],
            p=1,
            r=ratio or 2.0,
            steps=None if ratio is not None else dts,
        ),
    )
    decomposition = decompose_generator(extrapolated, basis)

    rows = []
    for dt, channel, generator in zip(dts, channels, generators):
        rows.append(
            ExtractionRow(
                dt=dt,
                frobenius_deviation=(generator - extrapolated).norm(),
                trace_defect=channel.trace_defect(),
                min_choi_eig=channel.min_choi_eigenvalue(),
            )
        )
    deviations = [r.frobenius_deviation for r in rows]
    order, r2 = fit_convergence_order(dts, deviations)

    flags = []
    if any(b >= a for a, b in zip(deviations, deviations[1:])):
        flags.append("non_monotone_deviation")
        logger.warning(f"Deviations are not monotone in dt for {schedule.name or 'schedule'}: {deviations}")
    if order is None:
        flags.append("degenerate_deviation")
    elif r2 < MIN_ORDER_R2:
        flags.append("poor_order_fit")
        logger.warning(f"Convergence order fit has R^2 = {r2:.3f} < {MIN_ORDER_R2}")
    drift = mean_field_drift(schedule, dts[-1])
    if drift > DRIFT_TOLERANCE:
        flags.append("mean_field_drift")
        logger.warning(f"Interaction has nonzero ancilla mean: drift magnitude {drift:.3e}")

    logger.info(
        f"Extracted generator for {schedule.name or 'schedule'}: order "
        f"{order if order is None else round(order, 4)}, residual {decomposition.residual:.3e}"
    )
    return ExtractionReport(
        superoperator=extrapolated,
        spec=decomposition.spec,
        residual=decomposition.residual,
        rows=tuple(rows),
        fitted_order=order,
        fit_r2=r2,
        drift=drift,
        flags=tuple(flags),
        generators=tuple(generators),
    )


class TermDocument(BaseModel):
    coupling: Coupling
    generator: str


class StageDocument(BaseModel):
    kind: StageKind
    targets: List[str]
    terms: List[TermDocument]
    fraction: float = Field(1.0, gt=0)
    label: str = ""


class PrepDocument(BaseModel):
    kind: str = "ground"
    dims: List[int] = Field(default_factory=list)
    state: Optional[OperatorPayload] = None
    entangler: Optional[OperatorPayload] = None
    mu: float = 0.0
    components: List["WeightedPrepDocument"] = Field(default_factory=list)


class WeightedPrepDocument(BaseModel):
    weight: float = Field(..., ge=0)
    prep: PrepDocument


PrepDocument.model_rebuild()


class ScheduleDocument(BaseModel):
    name: str = ""
    system_dims: List[int]
    system_names: List[str]
    ancilla_names: List[str]
    prep: PrepDocument
    scaling: Dict[str, Any]
    generators: Dict[str, OperatorPayload]
    stages: List[StageDocument]


def prep_to_document(prep: AncillaPrep) -> PrepDocument:
    return PrepDocument(
        kind=prep.kind,
        dims=prep.dims.as_list(),
        state=prep.state.to_payload() if prep.state is not None else None,
        entangler=prep.entangler.to_payload() if prep.entangler is not None else None,
        mu=prep.mu,
        components=[
            WeightedPrepDocument(weight=w, prep=prep_to_document(p)) for w, p in prep.components
        ],
    )


def prep_from_document(doc: PrepDocument) -> AncillaPrep:
    return AncillaPrep(
        dims=HilbertDims(tuple(doc.dims)),
        kind=doc.kind,
        state=Operator.from_payload(doc.state) if doc.state is not None else None,
        entangler=Operator.from_payload(doc.entangler) if doc.entangler is not None else None,
        mu=doc.mu,
        components=tuple((c.weight, prep_from_document(c.prep)) for c in doc.components),
    )


def schedule_to_document(schedule: CollisionSchedule) -> ScheduleDocument:
    return ScheduleDocument(
        name=schedule.name,
        system_dims=schedule.system_dims.as_list(),
        system_names=list(schedule.system_names),
        ancilla_names=list(schedule.ancilla_names),
        prep=prep_to_document(schedule.prep),
        scaling=schedule.scaling.to_dict(),
        generators={k: v.to_payload() for k, v in schedule.generators.items()},
        stages=[
            StageDocument(
                kind=s.kind,
                targets=list(s.targets),
                terms=[TermDocument(coupling=c, generator=g) for c, g in s.terms],
                fraction=s.fraction,
                label=s.label,
            )
            for s in schedule.program.stages
        ],
    )


def schedule_from_document(doc: ScheduleDocument) -> CollisionSchedule:
    return CollisionSchedule(
        system_dims=HilbertDims(tuple(doc.system_dims)),
        prep=prep_from_document(doc.prep),
        program=TimestepProgram(
            tuple(
                Stage(
                    kind=s.kind,
                    targets=tuple(s.targets),
                    terms=tuple((t.coupling, t.generator) for t in s.terms),
                    fraction=s.fraction,
                    label=s.label,
                )
                for s in doc.stages
            )
        ),
        generators={k: Operator.from_payload(v) for k, v in doc.generators.items()},
        scaling=ScalingRule(**doc.scaling),
        ancilla_names=tuple(doc.ancilla_names),
        system_names=tuple(doc.system_names),
        name=doc.name,
    )
