import os
import csv
import io
import json
import hashlib
import logging
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from sqlalchemy.orm import Session

from database import ExperimentRun, SessionLocal, init_db
from app.services.operator_core import (
    STRUCTURAL_TOL,
    HilbertDims,
    Operator,
    OperatorPayload,
    basis_ket,
    embed_local,
    frobenius_distance,
    kron,
    projector,
    sigma_minus,
    sigma_plus,
)
from app.services.fock_space import FockMode, number_operator
from app.services.gkls_engine import (
    GKLSSpec,
    GKLSSpecPayload,
    GKSBasis,
    MatrixPayload,
    compare_specs,
    flow,
    hamiltonian_superoperator,
    local_gks_operators,
    traceless_part,
)
from app.services.collision_engine import (
    DEFAULT_WORKERS,
    AncillaPrep,
    CollisionSchedule,
    ExtractionReport,
    ScheduleDocument,
    StageKind,
    check_dt_sequence,
    default_dt_sequence,
    extract_generator,
    run_trajectory,
    schedule_from_document,
    schedule_to_document,
)
from app.services.model_library import (
    CascadeSpec,
    EntangledModelSpec,
    InteractionTerm,
    McmAncillaSpec,
    ModelBuild,
    emission_pair_models,
    bell_like_entangler,
    build_cascade,
    build_composite,
    build_entangled,
    build_mcm,
    build_mcm_brick,
    build_single,
    compile_gkls_to_mcm,
    ground_qubit_prep,
    qubit_pair_state,
    random_gkls_target,
    slow_environment_scan,
    squeezed_example,
    thermal_qubit_prep,
)
from app.services.registry import OperatorRegistry, random_parity_state

logger = logging.getLogger(__name__)

LIBRARY_VERSION = "0.1.0"
RESULTS_DIR = os.environ.get("COLLIDER_RESULTS_DIR", "results")
CSV_FLOAT_FORMAT = ".17g"
SUMMARY_FILE = "summary.json"
INITIAL_STATES = ("excited", "ground", "plus", "first_excited")
MIN_SCAN_POINTS = 5

DEFAULT_TOLERANCES: Dict[str, float] = {
    "kossakowski": 1e-2,
    "hamiltonian": 1e-2,
    "order_window": 0.1,
    "choi_floor": 1e-9,
    "trace_defect": 1e-12,
    "residual": 1e-4,
    "cross_site": 1e-3,
    "symmetry": 1e-12,
    "splitting": 1e-6,
    "lamb_shift": 1e-2,
    "lamb_shift_formula": 1e-12,
    "counter": 1e-2,
    "coefficients": 1e-6,
    "trajectory": 3e-3,
    "positivity": 1e-9,
}

ComplexValue = Union[float, Tuple[float, float]]
OperatorField = Union[str, OperatorPayload]


def to_complex(value: ComplexValue) -> complex:
    """Config complex numbers are either a float or [re, im]."""
    if isinstance(value, (tuple, list)):
        return complex(value[0], value[1])
    return complex(value)


class ConfigValidationError(ValueError):
    """Raised with every violated field of an experiment config."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("invalid experiment config: " + "; ".join(self.errors))


class ExperimentKind(str, Enum):
    EXTRACT = "extract"
    TRAJECTORY = "trajectory"
    PAIR_COMPARISON = "appendixA"
    SLOW_ENVIRONMENT = "appendixB"
    SQUEEZED = "squeezed-example"
    SPLITTING = "splitting-equivalence"


class BrickConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    first: Tuple[int, str]
    second: Tuple[int, str]
    lambda_first: ComplexValue = 1.0
    lambda_second: ComplexValue = 1.0


class PairConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    weight: float = Field(1.0, ge=0)
    b_gg: ComplexValue = 1.0
    b_ee: ComplexValue = 0.0


class AncillaConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["ground", "thermal", "pair", "random_parity", "mixture"] = "ground"
    excitation: float = Field(0.0, ge=0, le=1)
    entangler: bool = False
    b_gg: ComplexValue = 1.0
    b_ee: ComplexValue = 0.0
    components: List[PairConfig] = Field(default_factory=list)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["single", "mcm", "compiled", "cascade", "composite", "entangled", "squeezed"]
    jump: OperatorField = "sigma_minus"
    h_s: Optional[OperatorField] = None
    splitting: Literal["joint", "interaction_first", "system_first"] = "interaction_first"
    sites: int = Field(2, ge=1)
    ancilla: AncillaConfig = Field(default_factory=AncillaConfig)
    bricks: List[BrickConfig] = Field(default_factory=list)
    basis: List[Tuple[int, str]] = Field(default_factory=list)
    target: Optional[GKLSSpecPayload] = None
    samples: int = Field(1, ge=1)
    weights: List[ComplexValue] = Field(default_factory=list)
    reversed: bool = False
    counter_hamiltonian: bool = False
    dissipating_site: int = Field(0, ge=0)
    r: float = Field(0.0, ge=0)
    psi: float = 0.0
    n1: float = Field(0.0, ge=0)
    n2: float = Field(0.0, ge=0)
    cutoff: Optional[int] = Field(None, ge=1)


class TrajectoryConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t_final: float = Field(..., gt=0)
    dt: float = Field(..., gt=0)
    initial: OperatorField = "excited"

    @model_validator(mode="after")
    def whole_number_of_steps(self):
        steps = self.t_final / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError(f"t_final / dt must be a whole number of steps, got {steps}")
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: ExperimentKind
    name: str = Field("experiment", min_length=1, pattern=r"^[A-Za-z0-9_.-]+$")
    model: Optional[ModelConfig] = None
    gamma: float = Field(1.0, ge=0)
    mu: float = 0.0
    g_s: float = Field(1.0, ge=0)
    kappa: float = Field(1.0, gt=0)
    slow_exponent: float = Field(0.5, gt=0, lt=1)
    lambdas: Tuple[ComplexValue, ComplexValue] = (1.0, 1.0)
    dt_sequence: Optional[List[float]] = None
    seed: Optional[int] = None
    output_dir: Optional[str] = None
    tolerances: Dict[str, float] = Field(default_factory=dict)
    operators: Dict[str, OperatorPayload] = Field(default_factory=dict)
    trajectory: Optional[TrajectoryConfig] = None
    max_workers: Optional[int] = Field(None, ge=1)

    @field_validator("dt_sequence")
    @classmethod
    def valid_dt_sequence(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is not None:
            check_dt_sequence(v)
        return v

    @field_validator("tolerances")
    @classmethod
    def known_tolerances(cls, v: Dict[str, float]) -> Dict[str, float]:
        unknown = sorted(set(v) - set(DEFAULT_TOLERANCES))
        if unknown:
            raise ValueError(f"unknown tolerance keys {unknown}; known: {sorted(DEFAULT_TOLERANCES)}")
        bad = sorted(k for k, x in v.items() if not (np.isfinite(x) and x > 0))
        if bad:
            raise ValueError(f"tolerances must be positive and finite: {bad}")
        return v

    @field_validator("operators")
    @classmethod
    def operator_names_do_not_shadow(cls, v: Dict[str, OperatorPayload]) -> Dict[str, OperatorPayload]:
        clashes = sorted(name for name in v if ":" in name or name in INITIAL_STATES)
        if clashes:
            raise ValueError(f"operator names {clashes} clash with built-in references")
        return v


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical JSON form of the config."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def resolve_tolerances(config: ExperimentConfig, tol_scale: float = 1.0) -> Dict[str, float]:
    merged = {**DEFAULT_TOLERANCES, **config.tolerances}
    return {k: v * tol_scale for k, v in merged.items()}


def _pydantic_errors(error: ValidationError) -> List[str]:
    out = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item["loc"]) or "<root>"
        out.append(f"{loc}: {item['msg']}")
    return out


def _qubit_labels() -> List[str]:
    return [label for label, _ in local_gks_operators(2)]


def _site_dims(model: ModelConfig, jump: Optional[Operator]) -> Optional[HilbertDims]:
    if model.type in ("mcm", "compiled"):
        if model.target is not None:
            return HilbertDims(tuple(model.target.dims))
        return HilbertDims((2,) * model.sites)
    if model.type == "squeezed":
        return HilbertDims((2, 2))
    if jump is None:
        return None
    if model.type == "single":
        return HilbertDims((jump.dim,))
    return HilbertDims((jump.dim,) * model.sites)


def _is_random(model: ModelConfig) -> bool:
    if model.type == "compiled" and model.target is None:
        return True
    return model.type == "entangled" and model.ancilla.kind == "random_parity"


def _model_problems(config: ExperimentConfig, registry: OperatorRegistry) -> List[str]:
    model = config.model
    problems = []
    jump = None
    if model.type in ("single", "cascade", "composite", "entangled"):
        error = registry.check(model.jump)
        if error:
            problems.append(f"model.jump: {error}")
        else:
            jump = registry.resolve(model.jump)
            if len(jump.dims) != 1:
                problems.append("model.jump: must act on a single site")
                jump = None
            elif abs(jump.trace()) > STRUCTURAL_TOL:
                problems.append("model.jump: must be traceless")
    dims = _site_dims(model, jump)
    if model.h_s is not None:
        error = registry.check(model.h_s)
        if error:
            problems.append(f"model.h_s: {error}")
        else:
            h_s = registry.resolve(model.h_s)
            if dims is not None and h_s.dims != dims:
                problems.append(f"model.h_s: dims {h_s.dims.as_list()} do not match system dims {dims.as_list()}")
            elif not h_s.is_hermitian():
                problems.append("model.h_s: must be Hermitian")

    if _is_random(model) and config.seed is None:
        problems.append("seed: random experiments need an explicit seed")
    if model.samples > 1 and not _is_random(model):
        problems.append("model.samples: only random experiments draw more than one sample")

    labels = _qubit_labels()
    if model.type == "mcm":
        if not model.bricks:
            problems.append("model.bricks: an mcm model needs at least one brick")
        for i, brick in enumerate(model.bricks):
            for role, (site, label) in (("first", brick.first), ("second", brick.second)):
                if not 0 <= site < model.sites or label not in labels:
                    problems.append(f"model.bricks.{i}.{role}: unknown GKS operator ({site}, {label})")
    if model.type == "compiled":
        if model.target is not None:
            try:
                GKLSSpec.from_payload(model.target)
            except ValueError as e:
                problems.append(f"model.target: {e}")
        for i, (site, label) in enumerate(model.basis):
            if not 0 <= site < model.sites or label not in labels:
                problems.append(f"model.basis.{i}: unknown GKS operator ({site}, {label})")
    if model.type in ("cascade", "entangled") and model.weights and len(model.weights) != model.sites:
        problems.append(f"model.weights: expected {model.sites} weights, got {len(model.weights)}")
    if model.type == "composite" and model.dissipating_site >= model.sites:
        problems.append(f"model.dissipating_site: {model.dissipating_site} out of range for {model.sites} sites")

    ancilla = model.ancilla
    if model.type == "entangled":
        if ancilla.kind == "thermal":
            problems.append("model.ancilla.kind: entangled models take ground, pair, random_parity or mixture")
        paired = ancilla.kind in ("pair", "random_parity", "mixture") or ancilla.entangler
        if paired and model.sites != 2:
            problems.append("model.sites: two-qubit ancilla preparations need exactly 2 sites")
        if ancilla.kind == "mixture":
            total = sum(c.weight for c in ancilla.components)
            if not ancilla.components:
                problems.append("model.ancilla.components: a mixture needs components")
            elif abs(total - 1.0) > 1e-12:
                problems.append(f"model.ancilla.components: weights sum to {total}, expected 1")
    elif model.type in ("single", "cascade", "composite"):
        if ancilla.kind not in ("ground", "thermal"):
            problems.append(f"model.ancilla.kind: {model.type} models take ground or thermal ancillas")
        if ancilla.entangler:
            problems.append(f"model.ancilla.entangler: {model.type} models have no entangling stage")
    if model.type == "single" and model.splitting == "joint" and model.h_s is None:
        problems.append("model.h_s: joint splitting needs a system Hamiltonian")
    return problems


def semantic_problems(config: ExperimentConfig) -> List[str]:
    """Checks pydantic cannot express: registry references, experiment/model pairing, regime bounds."""
    problems = []
    try:
        registry = OperatorRegistry(config.operators)
    except ValueError as e:
        return [f"operators: {e}"]
    kind = config.kind
    if kind in (ExperimentKind.EXTRACT, ExperimentKind.TRAJECTORY, ExperimentKind.SPLITTING, ExperimentKind.SQUEEZED):
        if config.model is None:
            problems.append(f"model: required for {kind.value} experiments")
    if kind == ExperimentKind.SPLITTING and config.model is not None:
        if config.model.type != "single":
            problems.append("model.type: splitting-equivalence compares single-system schedules")
        if config.model.h_s is None:
            problems.append("model.h_s: splitting-equivalence needs a system Hamiltonian")
    if kind == ExperimentKind.SQUEEZED and config.model is not None and config.model.type != "squeezed":
        problems.append("model.type: squeezed-example needs a squeezed model")
    if kind == ExperimentKind.TRAJECTORY:
        if config.trajectory is None:
            problems.append("trajectory: required for trajectory experiments")
        elif config.gamma * config.trajectory.dt >= 1.0:
            problems.append("trajectory.dt: gamma * dt must stay below 1")
    if kind == ExperimentKind.SLOW_ENVIRONMENT:
        if config.gamma <= 0:
            problems.append("gamma: the slow-environment scan needs gamma > 0")
        if config.dt_sequence is not None and len(config.dt_sequence) < MIN_SCAN_POINTS:
            problems.append(f"dt_sequence: the slow-environment scan needs at least {MIN_SCAN_POINTS} values")
    if config.dt_sequence is not None and config.gamma * config.dt_sequence[0] >= 1.0:
        problems.append("dt_sequence: gamma * dt must stay below 1")
    if config.model is not None:
        problems.extend(_model_problems(config, registry))
    if config.trajectory is not None:
        initial = config.trajectory.initial
        if not (isinstance(initial, str) and initial in INITIAL_STATES):
            error = registry.check(initial)
            if error:
                problems.append(f"trajectory.initial: {error}")
    return problems


def validate_config(data: Dict[str, Any], seed: Optional[int] = None) -> ExperimentConfig:
    """
    Parses and checks an experiment config.

    Args:
        data: Parsed JSON document
        seed: Overrides the config seed when given

    Returns:
        The validated ExperimentConfig

    Raises:
        ConfigValidationError: Listing every violated field
    """
    if not isinstance(data, dict):
        raise ConfigValidationError(["<root>: config must be a JSON object"])
    if seed is not None:
        data = {**data, "seed": seed}
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigValidationError(_pydantic_errors(e))
    problems = semantic_problems(config)
    if problems:
        raise ConfigValidationError(problems)
    return config


def load_config(path: str, seed: Optional[int] = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigValidationError([f"{path}: {e}"])
    return validate_config(data, seed)


def initial_state(ref: OperatorField, dims: HilbertDims, registry: OperatorRegistry) -> Operator:
    """Named product states (excited, ground, plus, first_excited) or a registry density matrix."""
    if isinstance(ref, str) and ref in INITIAL_STATES:
        factors = []
        for m, d in enumerate(dims):
            if ref == "excited" or (ref == "first_excited" and m == 0):
                factors.append(projector(d, d - 1))
            elif ref == "plus":
                v = (basis_ket(d, 0) + basis_ket(d, 1)) / np.sqrt(2.0)
                factors.append(Operator(HilbertDims((d,)), np.outer(v, v.conj())))
            else:
                factors.append(projector(d, 0))
        return kron(*factors)
    rho = registry.resolve(ref)
    if rho.dims != dims:
        raise ValueError(f"initial state dims {rho.dims.as_list()} do not match system dims {dims.as_list()}")
    if not rho.is_density_matrix():
        raise ValueError("initial state is not a density matrix")
    return rho


def _weights(model: ModelConfig) -> List[complex]:
    if model.weights:
        return [to_complex(w) for w in model.weights]
    return [1.0] * model.sites


def _local_prep(model: ModelConfig) -> AncillaPrep:
    if model.ancilla.kind == "thermal":
        return thermal_qubit_prep(model.ancilla.excitation)
    return ground_qubit_prep()


def _entangled_spec(
    model: ModelConfig, jump: Operator, rng: Optional[np.random.Generator]
) -> EntangledModelSpec:
    ancilla = model.ancilla
    pair_dims = HilbertDims((2, 2))
    entangler = None
    if ancilla.kind == "pair":
        state = qubit_pair_state(to_complex(ancilla.b_gg), to_complex(ancilla.b_ee))
        prep = AncillaPrep(pair_dims, kind="explicit", state=state)
    elif ancilla.kind == "random_parity":
        prep = AncillaPrep(pair_dims, kind="explicit", state=random_parity_state(rng))
    elif ancilla.kind == "mixture":
        components = tuple(
            (c.weight, AncillaPrep(pair_dims, kind="explicit", state=qubit_pair_state(to_complex(c.b_gg), to_complex(c.b_ee))))
            for c in ancilla.components
        )
        prep = AncillaPrep(pair_dims, kind="mixture", components=components)
    else:
        prep = ground_qubit_prep(model.sites)
        if ancilla.entangler:
            entangler = bell_like_entangler()
    terms = [
        InteractionTerm(m, jump, sigma_plus(), weight=w, ancilla=m, label=f"s{m}")
        for m, w in enumerate(_weights(model))
    ]
    return EntangledModelSpec(HilbertDims((jump.dim,) * model.sites), tuple(terms), prep, entangler)


def build_model(
    config: ExperimentConfig,
    registry: Optional[OperatorRegistry] = None,
    rng: Optional[np.random.Generator] = None,
) -> ModelBuild:
    """Builds the collision schedule and predicted spec a config's model block describes."""
    registry = registry or OperatorRegistry(config.operators)
    model = config.model
    gamma, g_s = config.gamma, config.g_s
    jump = registry.resolve(model.jump)
    h_s = registry.resolve(model.h_s) if model.h_s is not None else None

    if model.type == "single":
        return build_single(gamma, jump, h_s, g_s, model.splitting, _local_prep(model))
    if model.type == "mcm":
        basis = GKSBasis.local((2,) * model.sites)
        specs = [
            McmAncillaSpec(
                tuple(b.first), tuple(b.second), to_complex(b.lambda_first), to_complex(b.lambda_second)
            )
            for b in model.bricks
        ]
        return build_mcm(basis, specs, gamma, h_s, g_s)
    if model.type == "compiled":
        if model.target is not None:
            target = GKLSSpec.from_payload(model.target)
        else:
            keys = model.basis or [(m, label) for m in range(model.sites) for label in ("sm", "sp")]
            basis = GKSBasis.from_labels((2,) * model.sites, [tuple(k) for k in keys])
            target = random_gkls_target(basis, rng, rate=gamma, h_s=h_s * g_s if h_s is not None else None)
        return compile_gkls_to_mcm(target, g_s)
    if model.type == "cascade":
        terms = [
            InteractionTerm(m, jump, sigma_plus(), weight=w, label=f"s{m}")
            for m, w in enumerate(_weights(model))
        ]
        spec = CascadeSpec(
            HilbertDims((jump.dim,) * model.sites), tuple(terms), reversed=model.reversed, prep=_local_prep(model)
        )
        return build_cascade(spec, gamma, h_s, g_s, counter_hamiltonian=model.counter_hamiltonian)
    if model.type == "composite":
        site = model.dissipating_site
        term = InteractionTerm(site, jump, sigma_plus(), label=f"s{site}")
        return build_composite((jump.dim,) * model.sites, site, [term], h_s, gamma, g_s, _local_prep(model))
    if model.type == "entangled":
        spec = _entangled_spec(model, jump, rng)
        return build_entangled(
            spec, gamma, config.mu, h_s, g_s, kappa=config.kappa, slow_exponent=config.slow_exponent
        )
    if model.type == "squeezed":
        return squeezed_example(model.r, model.psi, model.n1, model.n2, gamma, model.cutoff).build
    raise ValueError(f"Unknown model type {model.type!r}")


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    value: float
    tolerance: float
    formula: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "value": self.value,
            "tolerance": self.tolerance,
            "formula": self.formula,
        }


@dataclass
class Table:
    columns: Tuple[str, ...]
    rows: List[Sequence[Any]]


@dataclass
class ResultBundle:
    name: str
    kind: str
    output_dir: Optional[str]
    summary: Dict[str, Any]
    tables: Dict[str, Table]
    verdicts: List[Verdict]
    warnings: List[str]
    provenance: Dict[str, str]
    run_id: Optional[int] = None

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def to_document(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "passed": self.passed,
            "provenance": self.provenance,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "warnings": list(self.warnings),
            "tables": sorted(f"{name}.csv" for name in self.tables),
            "summary": self.summary,
        }


def jsonable(obj: Any) -> Any:
    """Plain JSON types; complex numbers become [re, im], non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, Operator):
        return obj.to_payload().model_dump()
    if isinstance(obj, GKLSSpec):
        return obj.to_payload().model_dump()
    if isinstance(obj, BaseModel):
        return jsonable(obj.model_dump(mode="json"))
    if isinstance(obj, np.generic):
        return jsonable(obj.item())
    if isinstance(obj, complex):
        return [jsonable(obj.real), jsonable(obj.imag)]
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), CSV_FLOAT_FORMAT)
    return str(value)


def render_csv(table: Table) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_format_cell(v) for v in row])
    return buffer.getvalue()


def atomic_write(path: str, text: str) -> None:
    """Writes through a temp file in the target directory, then renames over `path`."""
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=f"-{os.path.basename(path)}")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_bundle(bundle: ResultBundle, directory: str) -> List[str]:
    written = []
    for name, table in sorted(bundle.tables.items()):
        path = os.path.join(directory, f"{name}.csv")
        atomic_write(path, render_csv(table))
        written.append(path)
    path = os.path.join(directory, SUMMARY_FILE)
    atomic_write(path, json.dumps(jsonable(bundle.to_document()), indent=2, sort_keys=True) + "\n")
    written.append(path)
    logger.info(f"Wrote {len(written)} result files to {directory}")
    return written


@dataclass
class _RunContext:
    config: ExperimentConfig
    registry: OperatorRegistry
    tolerances: Dict[str, float]
    verdicts: List[Verdict] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    tables: Dict[str, Table] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)

    @property
    def gamma_scale(self) -> float:
        return self.config.gamma if self.config.gamma > 0 else 1.0

    def tol(self, key: str) -> float:
        return self.tolerances[key]

    def check(self, name: str, value: float, tolerance: float, formula: str, passed: Optional[bool] = None):
        value = float(value)
        ok = bool(value <= tolerance) if passed is None else bool(passed)
        self.verdicts.append(Verdict(name, ok, value, float(tolerance), formula))
        if not ok:
            logger.info(f"Check {name} failed: {value:.3e} vs tolerance {tolerance:.3e}")

    def warn(self, message: str):
        logger.warning(message)
        self.warnings.append(message)

    def build(self, rng: Optional[np.random.Generator] = None) -> ModelBuild:
        try:
            return build_model(self.config, self.registry, rng)
        except ValueError as e:
            raise ConfigValidationError([f"model: {e}"])

    def builds(self) -> List[ModelBuild]:
        rng = np.random.default_rng(self.config.seed) if self.config.seed is not None else None
        return [self.build(rng) for _ in range(self.config.model.samples)]

    def extract(self, build: ModelBuild, label: str) -> ExtractionReport:
        report = extract_generator(
            build.schedule, self.config.dt_sequence, max_workers=self.config.max_workers
        )
        table = "extraction" if label == "model" else f"extraction_{label}"
        self.tables[table] = Table(ExtractionReport.CSV_COLUMNS, report.csv_rows())
        for flag in report.flags:
            self.warn(f"{label}: {flag}")
        if "zero_mean_violation" in build.notes:
            self.warn(f"{label}: ancilla state gives the interaction a nonzero mean")
        self.summary[label] = {
            "extraction": report.to_summary(),
            "predicted": build.predicted,
            "drift": build.drift,
            "notes": list(build.notes),
        }
        return report

    def structural_checks(self, report: ExtractionReport, prefix: str = ""):
        self.check(
            f"{prefix}cptp",
            -min(r.min_choi_eig for r in report.rows),
            self.tol("choi_floor"),
            "-min(min_choi_eig) <= choi_floor",
        )
        self.check(
            f"{prefix}trace_preservation",
            max(r.trace_defect for r in report.rows),
            self.tol("trace_defect"),
            "max(trace_defect) <= trace_defect",
        )
        if report.fitted_order is None:
            self.check(
                f"{prefix}convergence_order",
                max(r.frobenius_deviation for r in report.rows),
                self.tol("residual") * self.gamma_scale,
                "degenerate: max(frobenius_deviation) <= residual * gamma",
            )
        else:
            self.check(
                f"{prefix}convergence_order",
                abs(report.fitted_order - 1.0),
                self.tol("order_window"),
                "|slope of log(frobenius_deviation) vs log(dt) - 1| <= order_window",
            )
        self.check(
            f"{prefix}decomposition_residual",
            report.residual,
            self.tol("residual") * self.gamma_scale,
            "|L(spec) - L_extrapolated|_F <= residual * gamma",
        )

    def prediction_checks(self, build: ModelBuild, report: ExtractionReport, prefix: str = "", relative: bool = False):
        comparison = compare_specs(report.spec, build.predicted)
        if relative:
            self.check(
                f"{prefix}kossakowski",
                comparison.kossakowski_relative,
                self.tol("kossakowski"),
                "|gamma_ext - gamma_pred|_F / |gamma_pred|_F <= kossakowski",
            )
        else:
            self.check(
                f"{prefix}kossakowski",
                comparison.kossakowski_error,
                self.tol("kossakowski") * self.gamma_scale,
                "|gamma_ext - gamma_pred|_F <= kossakowski * gamma",
            )
        h_scale = max(1.0, traceless_part(build.predicted.h_eff).norm())
        self.check(
            f"{prefix}hamiltonian",
            comparison.hamiltonian_error,
            self.tol("hamiltonian") * h_scale,
            "|H_ext - H_pred|_F (traceless parts) <= hamiltonian * max(1, |H_pred|_F)",
        )
        return comparison


def _cross_site_mask(basis: GKSBasis) -> NDArray:
    sites = np.array([e.site for e in basis.ops])
    return sites[:, None] != sites[None, :]


def _model_extras(ctx: _RunContext, build: ModelBuild, report: ExtractionReport, prefix: str):
    model = ctx.config.model
    local = GKSBasis.local(build.schedule.system_dims)
    extracted = report.spec.reindexed(local)
    mask = _cross_site_mask(local)
    if model.type == "composite":
        value = float(np.max(np.abs(extracted.kossakowski[mask]))) if mask.any() else 0.0
        ctx.check(
            f"{prefix}cross_site_locality",
            value,
            ctx.tol("cross_site") * ctx.gamma_scale,
            "max |gamma_ext| over cross-site entries <= cross_site * gamma",
        )
    if model.type == "cascade" and build.raw_generator is not None:
        ctx.check(
            f"{prefix}causal_form",
            (report.superoperator - build.raw_generator).norm(),
            ctx.tol("lamb_shift") * ctx.gamma_scale,
            "|L_ext - (local + global dissipators)|_F <= lamb_shift * gamma",
        )
    if model.type == "entangled" and build.table is not None:
        scale = max(1.0, ctx.config.gamma)
        ctx.check(
            f"{prefix}index_symmetry",
            build.table.symmetry_defect,
            ctx.tol("symmetry") * scale,
            "max |t_jk - t_kj| over cross-ancilla pairs <= symmetry * max(1, gamma)",
        )
        ctx.check(
            f"{prefix}modulus_equality",
            build.table.modulus_gap,
            ctx.tol("symmetry") * scale,
            "max ||t_jk| - |t_j'k'|| over adjoint pairs <= symmetry * max(1, gamma)",
        )
        predicted = build.predicted.reindexed(local)
        gap = np.abs(extracted.kossakowski - predicted.kossakowski)[mask]
        ctx.check(
            f"{prefix}cross_block",
            float(gap.max()) if gap.size else 0.0,
            ctx.tol("kossakowski") * ctx.gamma_scale,
            "max |gamma_ext - gamma_pred| over cross-site entries <= kossakowski * gamma",
        )


def _run_extract(ctx: _RunContext):
    builds = ctx.builds()
    relative = ctx.config.model.type == "compiled"
    for i, build in enumerate(builds):
        label = "model" if len(builds) == 1 else f"sample{i:02d}"
        prefix = "" if len(builds) == 1 else f"{label}."
        report = ctx.extract(build, label)
        ctx.structural_checks(report, prefix)
        ctx.summary[label]["comparison"] = ctx.prediction_checks(build, report, prefix, relative).to_dict()
        _model_extras(ctx, build, report, prefix)


def _run_trajectory(ctx: _RunContext):
    build = ctx.build(np.random.default_rng(ctx.config.seed) if ctx.config.seed is not None else None)
    traj = ctx.config.trajectory
    dims = build.schedule.system_dims
    try:
        rho0 = initial_state(traj.initial, dims, ctx.registry)
    except ValueError as e:
        raise ConfigValidationError([f"trajectory.initial: {e}"])
    n_steps = traj.n_steps
    states = run_trajectory(build.schedule, rho0, traj.dt, n_steps)
    step = flow(build.predicted_generator(), traj.dt)
    predicted = [rho0]
    for _ in range(n_steps):
        predicted.append(step.apply(predicted[-1]))

    observables = [embed_local(number_operator(FockMode(d - 1)), m, dims) for m, d in enumerate(dims)]
    columns = ["step", "t", "trace", "purity", "min_eig"]
    columns += [f"excitation_s{m}" for m in range(len(dims))]
    columns += [f"excitation_s{m}_predicted" for m in range(len(dims))]
    rows = []
    gap = 0.0
    for k, (rho, ref) in enumerate(zip(states, predicted)):
        actual = [float(np.real(rho.expectation(n))) for n in observables]
        expected = [float(np.real(ref.expectation(n))) for n in observables]
        gap = max([gap] + [abs(a - b) for a, b in zip(actual, expected)])
        rows.append(
            [k, k * traj.dt, float(np.real(rho.trace())), rho.purity(), rho.min_eigenvalue()] + actual + expected
        )
    ctx.tables["trajectory"] = Table(tuple(columns), rows)
    ctx.check("positivity", -min(r[4] for r in rows), ctx.tol("positivity"), "-min(min_eig) <= positivity")
    ctx.check(
        "trace", max(abs(r[2] - 1.0) for r in rows), ctx.tol("trace_defect"), "max |trace - 1| <= trace_defect"
    )
    ctx.check(
        "trajectory_gap",
        gap,
        ctx.tol("trajectory"),
        "max |excitation_s{m} - excitation_s{m}_predicted| <= trajectory",
    )
    ctx.summary["model"] = {"predicted": build.predicted, "drift": build.drift, "n_steps": n_steps}


def _run_pair_comparison(ctx: _RunContext):
    gamma = ctx.config.gamma
    scale = ctx.gamma_scale
    l1, l2 = (to_complex(v) for v in ctx.config.lambdas)
    basis, brick, cascade_spec = emission_pair_models(l1, l2)
    builds = {
        "mcm": build_mcm_brick(basis, brick, gamma),
        "cascade": build_cascade(cascade_spec, gamma),
        "counter": build_cascade(cascade_spec, gamma, counter_hamiltonian=True),
    }
    reports = {}
    for label, build in builds.items():
        reports[label] = ctx.extract(build, label)
        ctx.structural_checks(reports[label], f"{label}.")
        ctx.summary[label]["comparison"] = ctx.prediction_checks(build, reports[label], f"{label}.").to_dict()

    sm, sp = sigma_minus(), sigma_plus()
    h_ls = builds["cascade"].lamb_shift
    expected = (kron(sm, sp) * (gamma * l1 * np.conj(l2)) - kron(sp, sm) * (gamma * np.conj(l1) * l2)) / 2j
    ctx.check(
        "lamb_shift_formula",
        frobenius_distance(h_ls, expected),
        ctx.tol("lamb_shift_formula") * scale,
        "|H_LS - gamma (l1 l2* s1- s2+ - l1* l2 s1+ s2-) / (2i)|_F <= lamb_shift_formula * gamma",
    )
    difference = reports["cascade"].superoperator - reports["mcm"].superoperator
    ctx.check(
        "lamb_shift_difference",
        (difference - hamiltonian_superoperator(h_ls)).norm(),
        ctx.tol("lamb_shift") * scale,
        "|(L_cascade - L_mcm) + i[H_LS, .]|_F <= lamb_shift * gamma",
    )
    extracted_h = traceless_part(reports["cascade"].spec.h_eff - reports["mcm"].spec.h_eff)
    ctx.check(
        "extracted_lamb_shift",
        frobenius_distance(extracted_h, traceless_part(h_ls)),
        ctx.tol("lamb_shift") * scale,
        "|(H_cascade - H_mcm) - H_LS|_F (traceless parts) <= lamb_shift * gamma",
    )
    ctx.check(
        "causal_form",
        (reports["cascade"].superoperator - builds["cascade"].raw_generator).norm(),
        ctx.tol("lamb_shift") * scale,
        "|L_cascade - (local + global dissipators)|_F <= lamb_shift * gamma",
    )
    ctx.check(
        "counter_hamiltonian",
        (reports["counter"].superoperator - reports["mcm"].superoperator).norm(),
        ctx.tol("counter") * scale,
        "|L_counter - L_mcm|_F <= counter * gamma",
    )
    brick_export = export_schedule(builds["mcm"].schedule, default_dt_sequence(gamma)[0])
    collisions = [s for s in brick_export.stages if s.kind == StageKind.COLLISION]
    palindromic = len(collisions) == 3 and [s.targets[0] for s in collisions] == ["s0", "s1", "s0"]
    ctx.check(
        "mcm_brick_stages",
        0.0 if palindromic else 1.0,
        0.0,
        "three collision stages on (s0, s1, s0)",
        passed=palindromic,
    )
    ctx.summary["lamb_shift"] = {
        "predicted": h_ls,
        "expected": expected,
        "extracted": extracted_h,
    }
    earlier = [(0, label) for label in _qubit_labels()]
    later = [(1, label) for label in _qubit_labels()]
    ctx.summary["cross_block"] = {
        "rows": [list(k) for k in earlier],
        "cols": [list(k) for k in later],
        "kossakowski": builds["cascade"].predicted.block(earlier, later),
    }


def _run_slow_environment(ctx: _RunContext):
    config = ctx.config
    dts = config.dt_sequence or default_dt_sequence(config.gamma)
    scan = slow_environment_scan(config.gamma, dts, config.kappa, config.slow_exponent)
    ctx.tables["slow_scan"] = Table(
        ("dt", "max_cross", "max_local", "ratio"),
        [[r.dt, r.max_cross, r.max_local, r.ratio] for r in scan.rows],
    )
    ratios = [r.ratio for r in scan.rows]
    violations = sum(1 for a, b in zip(ratios, ratios[1:]) if b >= a)
    ctx.check(
        "cross_ratio_monotone",
        float(violations),
        0.0,
        "count(ratio[k+1] >= ratio[k]) == 0",
    )
    ctx.check(
        "dt_count",
        float(len(dts)),
        float(MIN_SCAN_POINTS),
        f"len(dt) >= {MIN_SCAN_POINTS}",
        passed=len(dts) >= MIN_SCAN_POINTS,
    )
    if not scan.monotone:
        ctx.warn("cross/local ratio is not monotone in dt")
    ctx.summary["scan"] = {
        "fitted_exponent": scan.fitted_exponent,
        "fit_r2": scan.fit_r2,
        "monotone": scan.monotone,
        "kappa": config.kappa,
        "slow_exponent": config.slow_exponent,
    }


def _run_squeezed(ctx: _RunContext):
    model = ctx.config.model
    try:
        example = squeezed_example(model.r, model.psi, model.n1, model.n2, ctx.config.gamma, model.cutoff)
    except ValueError as e:
        raise ConfigValidationError([f"model: {e}"])
    rows = []
    for key in ("down1", "up1", "down2", "up2", "cross"):
        tf = complex(example.trace_form[key])
        cf = complex(example.closed_form[key])
        rows.append([key, tf.real, tf.imag, cf.real, cf.imag, example.relative_errors.get(key, 0.0)])
    ctx.tables["coefficients"] = Table(
        ("coefficient", "trace_form_re", "trace_form_im", "closed_form_re", "closed_form_im", "relative_error"),
        rows,
    )
    ctx.check(
        "trace_formula",
        max(example.relative_errors.values(), default=0.0),
        ctx.tol("coefficients"),
        "max(relative_error) <= coefficients",
    )
    closed = compare_specs(example.build.predicted, example.closed_form_spec)
    ctx.check(
        "closed_form_spec",
        closed.kossakowski_relative,
        ctx.tol("coefficients"),
        "|gamma_pred - gamma_closed|_F / |gamma_closed|_F <= coefficients",
    )
    report = ctx.extract(example.build, "model")
    ctx.structural_checks(report)
    ctx.summary["model"]["comparison"] = ctx.prediction_checks(example.build, report).to_dict()
    ctx.summary["squeezed"] = {
        "cutoff": example.cutoff,
        "truncation_defect": example.truncation_defect,
        "closed_form": example.closed_form,
        "trace_form": example.trace_form,
    }


def _run_splitting(ctx: _RunContext):
    config = ctx.config
    model = config.model
    jump = ctx.registry.resolve(model.jump)
    h_s = ctx.registry.resolve(model.h_s)
    reports = {}
    for variant in ("joint", "interaction_first", "system_first"):
        build = build_single(config.gamma, jump, h_s, config.g_s, variant, _local_prep(model))
        reports[variant] = ctx.extract(build, variant)
        ctx.structural_checks(reports[variant], f"{variant}.")
        ctx.summary[variant]["comparison"] = ctx.prediction_checks(build, reports[variant], f"{variant}.").to_dict()
    rows = []
    for a, b in combinations(reports, 2):
        rows.append([a, b, (reports[a].superoperator - reports[b].superoperator).norm()])
    ctx.tables["pairwise"] = Table(("first", "second", "frobenius_distance"), rows)
    ctx.check(
        "splitting_equivalence",
        max(r[2] for r in rows),
        ctx.tol("splitting"),
        "max(frobenius_distance) <= splitting",
    )


EXPERIMENTS: Dict[ExperimentKind, Callable[[_RunContext], None]] = {
    ExperimentKind.EXTRACT: _run_extract,
    ExperimentKind.TRAJECTORY: _run_trajectory,
    ExperimentKind.PAIR_COMPARISON: _run_pair_comparison,
    ExperimentKind.SLOW_ENVIRONMENT: _run_slow_environment,
    ExperimentKind.SQUEEZED: _run_squeezed,
    ExperimentKind.SPLITTING: _run_splitting,
}


def output_directory(config: ExperimentConfig, out_dir: Optional[str] = None) -> str:
    return out_dir or config.output_dir or os.path.join(RESULTS_DIR, config.name)


def run(
    config: ExperimentConfig,
    out_dir: Optional[str] = None,
    tol_scale: float = 1.0,
    record: bool = False,
    write: bool = True,
) -> ResultBundle:
    """
    Runs one experiment and writes its CSV tables and summary.json.

    Args:
        config: Validated experiment config
        out_dir: Output directory (default: config.output_dir, then results/<name>)
        tol_scale: Multiplies every tolerance
        record: Also record the run in the SQL run ledger
        write: Write output files

    Returns:
        ResultBundle with verdicts and warnings

    Raises:
        ConfigValidationError: If the model cannot be built from the config;
            nothing is written in that case
    """
    if not (np.isfinite(tol_scale) and tol_scale > 0):
        raise ConfigValidationError([f"tol_scale: must be positive, got {tol_scale}"])
    ctx = _RunContext(config, OperatorRegistry(config.operators), resolve_tolerances(config, tol_scale))
    logger.info(f"Running {config.kind.value} experiment {config.name}")
    EXPERIMENTS[config.kind](ctx)
    directory = output_directory(config, out_dir) if write else None
    bundle = ResultBundle(
        name=config.name,
        kind=config.kind.value,
        output_dir=directory,
        summary=ctx.summary,
        tables=ctx.tables,
        verdicts=ctx.verdicts,
        warnings=ctx.warnings,
        provenance={
            "config_hash": config_hash(config),
            "version": LIBRARY_VERSION,
            "tol_scale": format(tol_scale, CSV_FLOAT_FORMAT),
        },
    )
    if directory is not None:
        write_bundle(bundle, directory)
    failed = [v.name for v in bundle.verdicts if not v.passed]
    logger.info(
        f"Experiment {config.name}: {'pass' if bundle.passed else 'fail'} "
        f"({len(bundle.verdicts) - len(failed)}/{len(bundle.verdicts)} checks)"
        + (f", failed {failed}" if failed else "")
    )
    if record:
        bundle.run_id = record_run(bundle)
    return bundle


def run_batch(
    configs: Sequence[ExperimentConfig],
    out_root: Optional[str] = None,
    tol_scale: float = 1.0,
    max_workers: Optional[int] = None,
    record: bool = False,
) -> List[ResultBundle]:
    """Runs independent configs concurrently, each into its own directory."""
    names = [c.name for c in configs]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ConfigValidationError([f"name: batch configs must have distinct names, repeated {duplicates}"])

    def one(config: ExperimentConfig) -> ResultBundle:
        directory = os.path.join(out_root, config.name) if out_root else None
        return run(config, directory, tol_scale, record)

    with ThreadPoolExecutor(max_workers=max_workers or DEFAULT_WORKERS) as pool:
        return list(pool.map(one, configs))


def record_run(bundle: ResultBundle, db: Optional[Session] = None) -> Optional[int]:
    """Adds the run to the ledger; failures are logged, never raised."""
    owns_session = db is None
    if owns_session:
        init_db()
        db = SessionLocal()
    try:
        row = ExperimentRun(
            kind=bundle.kind,
            name=bundle.name,
            config_hash=bundle.provenance["config_hash"],
            library_version=bundle.provenance["version"],
            passed=bundle.passed,
            output_dir=bundle.output_dir,
            summary_json=json.dumps(jsonable(bundle.to_document()), sort_keys=True),
        )
        db.add(row)
        db.commit()
        db.refresh(row)
        return row.id
    except Exception as e:
        db.rollback()
        logger.error(f"Could not record run {bundle.name}: {e}")
        return None
    finally:
        if owns_session:
            db.close()


class ExportedFactor(BaseModel):
    name: str
    dim: int
    role: Literal["system", "ancilla"]


class ExportedStage(BaseModel):
    index: int
    kind: StageKind
    label: str
    targets: List[str]
    generator: str
    duration_fraction: float
    angles: List[float]
    unitary: MatrixPayload


class ScheduleExport(BaseModel):
    name: str
    dt: float
    version: str = LIBRARY_VERSION
    factors: List[ExportedFactor]
    stages: List[ExportedStage]
    schedule: ScheduleDocument


def export_schedule(schedule: CollisionSchedule, dt: float) -> ScheduleExport:
    """
    Gate list of one timestep: each stage with its targets, generator
    reference, duration fraction and instantiated unitary.
    """
    units = schedule.instantiate(dt)
    factors = [
        ExportedFactor(name=name, dim=d, role="system" if i < schedule.n_system else "ancilla")
        for i, (name, d) in enumerate(zip(schedule.factor_names, schedule.full_dims))
    ]
    stages = []
    for i, (stage, (_, unitary)) in enumerate(zip(schedule.program.stages, units)):
        stages.append(
            ExportedStage(
                index=i,
                kind=stage.kind,
                label=stage.label,
                targets=list(stage.targets),
                generator=stage.generator,
                duration_fraction=stage.fraction,
                angles=[schedule.scaling.angle(c, dt, stage.fraction) for c, _ in stage.terms],
                unitary=MatrixPayload.from_array(unitary),
            )
        )
    return ScheduleExport(
        name=schedule.name,
        dt=dt,
        factors=factors,
        stages=stages,
        schedule=schedule_to_document(schedule),
    )


def replay_export(export: ScheduleExport) -> float:
    """Largest entrywise gap between exported unitaries and a fresh instantiation of the embedded schedule."""
    schedule = schedule_from_document(export.schedule)
    units = schedule.instantiate(export.dt)
    if len(units) != len(export.stages):
        raise ValueError(f"Export lists {len(export.stages)} stages, schedule has {len(units)}")
    gap = 0.0
    for (_, unitary), stage in zip(units, export.stages):
        gap = max(gap, float(np.max(np.abs(unitary - stage.unitary.to_array()))))
    return gap


def export_config(config: ExperimentConfig, dt: float) -> ScheduleExport:
    """
    Exports the schedule a config describes; appendixA configs export the
    MCM brick.

    Raises:
        ConfigValidationError: If the config has no schedule to export
    """
    if config.model is not None:
        rng = np.random.default_rng(config.seed) if config.seed is not None else None
        try:
            build = build_model(config, OperatorRegistry(config.operators), rng)
        except ValueError as e:
            raise ConfigValidationError([f"model: {e}"])
        schedule = build.schedule
    elif config.kind == ExperimentKind.PAIR_COMPARISON:
        basis, brick, _ = emission_pair_models(*(to_complex(v) for v in config.lambdas))
        schedule = build_mcm_brick(basis, brick, config.gamma).schedule
    else:
        raise ConfigValidationError([f"model: {config.kind.value} configs without a model have no schedule to export"])
    try:
        return export_schedule(schedule, dt)
    except ValueError as e:
        raise ConfigValidationError([f"dt: {e}"])
