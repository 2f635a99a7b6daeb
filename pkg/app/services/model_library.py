import math
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from app.services.operator_core import (
    STRUCTURAL_TOL,
    HermitianPropagator,
    HilbertDims,
    Operator,
    as_dims,
    embed_local,
    identity,
    kron,
    sigma_minus,
    sigma_plus,
    sigma_x,
    zeros,
)
from app.services.fock_space import (
    FockMode,
    SqueezeParams,
    annihilation,
    default_cutoff,
    entangled_thermal_state,
)
from app.services.gkls_engine import (
    GKLSSpec,
    GKSBasis,
    Superoperator,
    build_liouvillian,
    decompose_generator,
    global_dissipator,
    lamb_shift,
    undaggered_to_daggered,
)
from app.services.collision_engine import (
    AncillaPrep,
    CollisionSchedule,
    Coupling,
    ScalingRule,
    Stage,
    StageKind,
    TimestepProgram,
    check_dt_sequence,
    fit_convergence_order,
    linearize_map,
    mean_field_drift,
)

logger = logging.getLogger(__name__)

ZERO_MEAN_TOL = 1e-10
EIGEN_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class InteractionTerm:
    """
    One coupling w A x B + h.c. between a system site and an ancilla factor.

    A is local on `site`, B is local on ancilla factor `ancilla`.
    """

    site: int
    system_op: Operator
    ancilla_op: Operator
    weight: complex = 1.0
    ancilla: int = 0
    label: str = ""

    def local_generator(self) -> Operator:
        """w A x B + conj(w) A^dag x B^dag on (site, ancilla)."""
        w = complex(self.weight)
        forward = kron(self.system_op, self.ancilla_op) * w
        return forward + forward.dag()

    def expanded(self) -> List[Tuple[int, Operator, Operator, int, str]]:
        """Both halves of the Hermitian completion as (site, A, B, ancilla, label)."""
        w = complex(self.weight)
        name = self.label or f"s{self.site}"
        return [
            (self.site, self.system_op * w, self.ancilla_op, self.ancilla, name),
            (self.site, self.system_op.dag() * w.conjugate(), self.ancilla_op.dag(), self.ancilla, f"{name}^dag"),
        ]


@dataclass(frozen=True, eq=False)
class CoefficientTable:
    """
    Undaggered coefficients t_jk = gamma Tr[B_k B_j rho_E] of the terms
    A_j rho A_k, with the index-symmetry and modulus reports.
    """

    labels: Tuple[str, ...]
    sites: Tuple[int, ...]
    table: NDArray
    symmetry_defect: float
    modulus_gap: float

    def entry(self, left: str, right: str) -> complex:
        return complex(self.table[self.labels.index(left), self.labels.index(right)])

    def cross_entries(self) -> List[Tuple[str, str, complex]]:
        out = []
        for j, lj in enumerate(self.labels):
            for k, lk in enumerate(self.labels):
                if self.sites[j] != self.sites[k]:
                    out.append((lj, lk, complex(self.table[j, k])))
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "labels": list(self.labels),
            "re": self.table.real.tolist(),
            "im": self.table.imag.tolist(),
            "symmetry_defect": self.symmetry_defect,
            "modulus_gap": self.modulus_gap,
        }


@dataclass(frozen=True, eq=False)
class ModelBuild:
    schedule: CollisionSchedule
    predicted: GKLSSpec
    drift: float = 0.0
    notes: Tuple[str, ...] = ()
    raw_generator: Optional[Superoperator] = None
    lamb_shift: Optional[Operator] = None
    table: Optional[CoefficientTable] = None

    def predicted_generator(self) -> Superoperator:
        if self.raw_generator is not None:
            return self.raw_generator
        return build_liouvillian(self.predicted)


def coefficient_table(
    terms: Sequence[InteractionTerm], rho_e: Operator, gamma: float
) -> CoefficientTable:
    """
    Direct-trace coefficients gamma Tr[B_k B_j rho_E] over the expanded terms.

    Index symmetry t_jk = t_kj is checked for every pair on different
    ancillas; the modulus report compares each cross entry with the entry of
    the adjoint pair.
    """
    expanded = [item for term in terms for item in term.expanded()]
    ancilla_dims = rho_e.dims
    b_ops = [embed_local(b, anc, ancilla_dims) for _, _, b, anc, _ in expanded]
    n = len(expanded)
    table = np.zeros((n, n), dtype=np.complex128)
    for j in range(n):
        for k in range(n):
            table[j, k] = gamma * rho_e.expectation(b_ops[k] @ b_ops[j])
    symmetry = 0.0
    modulus = 0.0
    for j in range(n):
        for k in range(n):
            if expanded[j][3] == expanded[k][3]:
                continue
            symmetry = max(symmetry, abs(table[j, k] - table[k, j]))
            partner_j = j ^ 1
            partner_k = k ^ 1
            modulus = max(modulus, abs(abs(table[j, k]) - abs(table[partner_j, partner_k])))
    return CoefficientTable(
        labels=tuple(e[4] for e in expanded),
        sites=tuple(e[0] for e in expanded),
        table=table,
        symmetry_defect=float(symmetry),
        modulus_gap=float(modulus),
    )


def _daggered_kossakowski(
    basis: GKSBasis, terms: Sequence[InteractionTerm], table: CoefficientTable
) -> NDArray:
    expanded = [item for term in terms for item in term.expanded()]
    return undaggered_to_daggered(basis, [(site, a) for site, a, _, _, _ in expanded], table.table)


def _zero_mean_defect(terms: Sequence[InteractionTerm], rho_e: Operator) -> float:
    worst = 0.0
    for term in terms:
        b = embed_local(term.ancilla_op, term.ancilla, rho_e.dims)
        worst = max(worst, abs(rho_e.expectation(b)))
    return worst


def _system_hamiltonian(system_dims: HilbertDims, h_s: Optional[Operator], g_s: float) -> Operator:
    if h_s is None:
        return zeros(system_dims)
    return h_s * g_s


def _with_system_stage(
    stages: List[Stage],
    generators: Dict[str, Operator],
    system_names: Sequence[str],
    h_s: Optional[Operator],
    label: str = "H_S",
) -> None:
    if h_s is None:
        return
    generators[label] = h_s
    stages.append(Stage(StageKind.SYSTEM_UNITARY, tuple(system_names), ((Coupling.SYSTEM, label),), 1.0, label))


def ground_qubit_prep(n: int = 1) -> AncillaPrep:
    return AncillaPrep(HilbertDims((2,) * n))


def thermal_qubit_prep(excitation: float) -> AncillaPrep:
    """Qubit ancilla with excited population `excitation`."""
    state = Operator(HilbertDims((2,)), np.diag([1.0 - excitation, excitation]))
    return AncillaPrep(HilbertDims((2,)), kind="explicit", state=state)


def build_single(
    gamma: float,
    jump: Optional[Operator] = None,
    h_s: Optional[Operator] = None,
    g_s: float = 1.0,
    splitting: str = "interaction_first",
    prep: Optional[AncillaPrep] = None,
) -> ModelBuild:
    """
    Single-system collision model with H_I = A x sigma^+ + h.c.

    Args:
        gamma: Dissipation rate
        jump: System operator A (default sigma^-)
        h_s: Free system Hamiltonian
        g_s: System coupling
        splitting: "joint" (single exponential of g_S H_S + g_I H_I),
            "interaction_first" (U_S U_I) or "system_first" (U_I U_S)
        prep: Ancilla preparation (default ground qubit)

    Returns:
        ModelBuild with the predicted single-site GKLS spec
    """
    jump = jump or sigma_minus()
    prep = prep or ground_qubit_prep()
    d = jump.dim
    system_dims = HilbertDims((d,))
    term = InteractionTerm(0, jump, sigma_plus(), label="A")
    generators: Dict[str, Operator] = {"H_I": term.local_generator()}
    stages: List[Stage] = []
    if splitting == "joint":
        if h_s is None:
            raise ValueError("joint splitting needs a system Hamiltonian")
        generators["H_S_joint"] = kron(h_s, identity(prep.dims))
        stages.append(
            Stage(
                StageKind.COLLISION,
                ("s0", "e0"),
                ((Coupling.SYSTEM, "H_S_joint"), (Coupling.INTERACTION, "H_I")),
                1.0,
                "joint",
            )
        )
    elif splitting in ("interaction_first", "system_first"):
        collision = Stage(StageKind.COLLISION, ("s0", "e0"), ((Coupling.INTERACTION, "H_I"),), 1.0, "collision")
        if splitting == "interaction_first":
            stages.append(collision)
            _with_system_stage(stages, generators, ("s0",), h_s)
        else:
            _with_system_stage(stages, generators, ("s0",), h_s)
            stages.append(collision)
    else:
        raise ValueError(f"Unknown splitting {splitting!r}")

    schedule = CollisionSchedule(
        system_dims=system_dims,
        prep=prep,
        program=TimestepProgram(tuple(stages)),
        generators=generators,
        scaling=ScalingRule(gamma=gamma, g_s=g_s),
        name=f"single_{splitting}",
    )
    basis = GKSBasis.local(system_dims)
    table = coefficient_table([term], prep.state_operator(), gamma)
    predicted = GKLSSpec(
        basis, _system_hamiltonian(system_dims, h_s, g_s), _daggered_kossakowski(basis, [term], table)
    )
    return ModelBuild(schedule, predicted, drift=mean_field_drift(schedule), table=table)


@dataclass(frozen=True)
class McmAncillaSpec:
    """Pair of jump operators (m, alpha), (m', alpha') served by one ancilla qubit."""

    first: Tuple[int, str]
    second: Tuple[int, str]
    lambda_first: complex = 1.0
    lambda_second: complex = 1.0

    @property
    def quartet(self) -> Tuple[int, str, int, str]:
        return (self.first[0], self.first[1], self.second[0], self.second[1])


def _mcm_predicted_block(basis: GKSBasis, spec: McmAncillaSpec) -> NDArray:
    gamma = np.zeros((basis.size, basis.size), dtype=np.complex128)
    weights = np.zeros(basis.size, dtype=np.complex128)
    weights[basis.index(*spec.first)] += spec.lambda_first
    weights[basis.index(*spec.second)] += spec.lambda_second
    gamma += np.outer(weights, weights.conj())
    return gamma


def _brick_stages(
    basis: GKSBasis, spec: McmAncillaSpec, ancilla: str, tag: str, generators: Dict[str, Operator]
) -> List[Stage]:
    def elementary(role: str, key: Tuple[int, str], weight: complex) -> str:
        site = key[0]
        f = basis.ops[basis.index(*key)].op
        name = f"{tag}_{role}_s{site}_{key[1]}"
        generators[name] = InteractionTerm(site, f, sigma_plus(), weight=weight).local_generator()
        return name

    outer = elementary("outer", spec.first, spec.lambda_first)
    inner = elementary("inner", spec.second, spec.lambda_second)
    s_outer = f"s{spec.first[0]}"
    s_inner = f"s{spec.second[0]}"
    return [
        Stage(StageKind.COLLISION, (s_outer, ancilla), ((Coupling.INTERACTION, outer),), 0.5, outer),
        Stage(StageKind.COLLISION, (s_inner, ancilla), ((Coupling.INTERACTION, inner),), 1.0, inner),
        Stage(StageKind.COLLISION, (s_outer, ancilla), ((Coupling.INTERACTION, outer),), 0.5, outer),
    ]


def build_mcm(
    basis: GKSBasis,
    ancilla_specs: Sequence[McmAncillaSpec],
    gamma: float,
    h_s: Optional[Operator] = None,
    g_s: float = 1.0,
) -> ModelBuild:
    """
    Several three-collision bricks, one fresh ancilla qubit each, composed in
    the given order.
    """
    generators: Dict[str, Operator] = {}
    stages: List[Stage] = []
    kossakowski = np.zeros((basis.size, basis.size), dtype=np.complex128)
    ancillas = []
    for i, spec in enumerate(ancilla_specs):
        ancilla = f"p{i}"
        ancillas.append(ancilla)
        stages.extend(_brick_stages(basis, spec, ancilla, f"brick{i}", generators))
        kossakowski += gamma * _mcm_predicted_block(basis, spec)
    system_names = tuple(f"s{i}" for i in range(len(basis.dims)))
    _with_system_stage(stages, generators, system_names, h_s)
    schedule = CollisionSchedule(
        system_dims=basis.dims,
        prep=ground_qubit_prep(len(ancillas)),
        program=TimestepProgram(tuple(stages)),
        generators=generators,
        scaling=ScalingRule(gamma=gamma, g_s=g_s),
        ancilla_names=tuple(ancillas),
        system_names=system_names,
        name="mcm",
    )
    predicted = GKLSSpec(basis, _system_hamiltonian(basis.dims, h_s, g_s), kossakowski)
    logger.info(f"Built MCM schedule with {len(ancillas)} bricks on dims {basis.dims.as_list()}")
    return ModelBuild(schedule, predicted, drift=mean_field_drift(schedule))


def build_mcm_brick(basis: GKSBasis, ancilla_spec: McmAncillaSpec, gamma: float) -> ModelBuild:
    """
    U(dt/2) U'(dt) U(dt/2) with elementary collisions
    exp(-i g_I tau (lambda F x sigma^+ + h.c.)) on a ground-state ancilla qubit.

    The predicted Kossakowski block is gamma * [[|l1|^2, l1 l2^*], [l1^* l2, |l2|^2]];
    a quartet naming the same operator twice collapses to gamma |l1 + l2|^2.
    """
    return build_mcm(basis, [ancilla_spec], gamma)


def random_gkls_target(
    basis: GKSBasis, rng: np.random.Generator, rate: float = 1.0, h_s: Optional[Operator] = None
) -> GKLSSpec:
    """Random PSD Kossakowski matrix G G^dag * rate / n over `basis`."""
    n = basis.size
    g = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    gamma = rate * (g @ g.conj().T) / max(n, 1)
    h = h_s if h_s is not None else zeros(basis.dims)
    return GKLSSpec(basis, h, 0.5 * (gamma + gamma.conj().T))


def compile_gkls_to_mcm(target: GKLSSpec, g_s: float = 1.0) -> ModelBuild:
    """
    Compiles a PSD GKLS spec into collisions: one ancilla qubit per
    Kossakowski eigenvector, elementary collisions in a palindromic
    second-order pattern, and a system stage for the Hamiltonian.

    Raises:
        ValueError: If the target Kossakowski matrix is not PSD
    """
    min_eig = target.min_eigenvalue
    if min_eig < -STRUCTURAL_TOL:
        raise ValueError(f"Target Kossakowski matrix is not PSD (min eigenvalue {min_eig:.3e})")
    basis = target.basis
    weights, vectors = np.linalg.eigh(0.5 * (target.kossakowski + target.kossakowski.conj().T))
    w_max = float(weights.max()) if weights.size else 0.0
    generators: Dict[str, Operator] = {}
    stages: List[Stage] = []
    ancillas: List[str] = []
    if w_max > 0:
        for k in range(len(weights)):
            if weights[k] <= EIGEN_FLOOR * w_max:
                continue
            ancilla = f"p{len(ancillas)}"
            ancillas.append(ancilla)
            lambdas = math.sqrt(weights[k] / w_max) * vectors[:, k]
            active = [a for a in range(basis.size) if abs(lambdas[a]) > 1e-14]
            names = []
            for a in active:
                entry = basis.ops[a]
                name = f"{ancilla}_s{entry.site}_{entry.label}"
                generators[name] = InteractionTerm(entry.site, entry.op, sigma_plus(), weight=lambdas[a]).local_generator()
                names.append((f"s{entry.site}", name))
            sweep = [(t, n, 0.5) for t, n in names[:-1]]
            palindrome = sweep + [(names[-1][0], names[-1][1], 1.0)] + sweep[::-1]
            for target_site, name, fraction in palindrome:
                stages.append(
                    Stage(StageKind.COLLISION, (target_site, ancilla), ((Coupling.INTERACTION, name),), fraction, name)
                )
    system_names = tuple(f"s{i}" for i in range(len(basis.dims)))
    h_target = target.h_eff
    has_hamiltonian = h_target.norm() > STRUCTURAL_TOL
    if has_hamiltonian:
        if g_s <= 0:
            raise ValueError("A Hamiltonian part needs g_s > 0")
        _with_system_stage(stages, generators, system_names, h_target / g_s)
    schedule = CollisionSchedule(
        system_dims=basis.dims,
        prep=ground_qubit_prep(len(ancillas)),
        program=TimestepProgram(tuple(stages)),
        generators=generators,
        scaling=ScalingRule(gamma=w_max, g_s=g_s),
        ancilla_names=tuple(ancillas),
        system_names=system_names,
        name="compiled_mcm",
    )
    logger.info(f"Compiled GKLS target into {len(ancillas)} ancillas and {len(stages)} stages")
    return ModelBuild(schedule, target, drift=mean_field_drift(schedule))


@dataclass(frozen=True, eq=False)
class CascadeSpec:
    """
    One ancilla sweeping the sites in `order`; each site couples through
    H_m = sum_alpha (w F_{m,alpha} x B_alpha + h.c.).
    """

    system_dims: HilbertDims
    terms: Tuple[InteractionTerm, ...]
    order: Tuple[int, ...] = ()
    reversed: bool = False
    prep: Optional[AncillaPrep] = None

    def __post_init__(self):
        object.__setattr__(self, "system_dims", as_dims(self.system_dims))
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.order:
            object.__setattr__(self, "order", tuple(sorted({t.site for t in self.terms})))
        if self.prep is None:
            object.__setattr__(self, "prep", ground_qubit_prep())
        defect = _zero_mean_defect(self.terms, self.prep.state_operator())
        if defect > ZERO_MEAN_TOL:
            raise ValueError(f"Ancilla operators must have zero mean, got |Tr[B rho_E]| = {defect:.3e}")

    def sweep(self) -> Tuple[int, ...]:
        return tuple(reversed(self.order)) if self.reversed else self.order


def build_cascade(
    spec: CascadeSpec,
    gamma: float,
    h_s: Optional[Operator] = None,
    g_s: float = 1.0,
    counter_hamiltonian: bool = False,
) -> ModelBuild:
    """
    Cascade model: per timestep one fresh ancilla collides with the sites in
    sweep order.

    The predicted spec is the symmetric dissipator plus the Lamb-shift
    Hamiltonian; `raw_generator` holds the causal form (local dissipators plus
    global dissipators over earlier/later site pairs). With
    `counter_hamiltonian` a system stage driven by -H_LS is appended and the
    prediction drops the Lamb shift.
    """
    system_names = tuple(f"s{i}" for i in range(len(spec.system_dims)))
    sweep = spec.sweep()
    generators: Dict[str, Operator] = {}
    stages: List[Stage] = []
    for site in sweep:
        site_terms = [t for t in spec.terms if t.site == site]
        generator = site_terms[0].local_generator()
        for t in site_terms[1:]:
            generator = generator + t.local_generator()
        name = f"H_cascade_s{site}"
        generators[name] = generator
        stages.append(Stage(StageKind.COLLISION, (f"s{site}", "e0"), ((Coupling.INTERACTION, name),), 1.0, name))
    _with_system_stage(stages, generators, system_names, h_s)

    basis = GKSBasis.local(spec.system_dims)
    table = coefficient_table(spec.terms, spec.prep.state_operator(), gamma)
    kossakowski = _daggered_kossakowski(basis, spec.terms, table)
    h_system = _system_hamiltonian(spec.system_dims, h_s, g_s)

    position = {site: i for i, site in enumerate(sweep)}
    ops = basis.embedded_ops()
    local = np.zeros_like(kossakowski)
    h_ls = zeros(spec.system_dims)
    for a, ea in enumerate(basis.ops):
        for b, eb in enumerate(basis.ops):
            if ea.site == eb.site:
                local[a, b] = kossakowski[a, b]
    raw = build_liouvillian(GKLSSpec(basis, h_system, local))
    for m in sweep:
        for m2 in sweep:
            if position[m2] <= position[m]:
                continue
            rows = [a for a, e in enumerate(basis.ops) if e.site == m]
            cols = [b for b, e in enumerate(basis.ops) if e.site == m2]
            block = kossakowski[np.ix_(rows, cols)]
            left = [ops[a] for a in rows]
            right = [ops[b] for b in cols]
            h_ls = h_ls + lamb_shift(block, left, right)
            raw = raw + global_dissipator(block, left, right)

    notes = []
    if counter_hamiltonian:
        if g_s <= 0:
            raise ValueError("counter_hamiltonian needs g_s > 0")
        generators["H_counter"] = (h_ls * (-1.0 / g_s)).hermitized()
        stages.append(
            Stage(StageKind.SYSTEM_UNITARY, system_names, ((Coupling.SYSTEM, "H_counter"),), 1.0, "H_counter")
        )
        predicted = GKLSSpec(basis, h_system, kossakowski)
        raw = build_liouvillian(predicted)
        notes.append("counter_hamiltonian")
    else:
        predicted = GKLSSpec(basis, (h_system + h_ls).hermitized(), kossakowski)

    schedule = CollisionSchedule(
        system_dims=spec.system_dims,
        prep=spec.prep,
        program=TimestepProgram(tuple(stages)),
        generators=generators,
        scaling=ScalingRule(gamma=gamma, g_s=g_s),
        system_names=system_names,
        ancilla_names=tuple(f"e{i}" for i in range(len(spec.prep.dims))),
        name="cascade",
    )
    logger.info(f"Built cascade schedule over sweep {list(sweep)}; |H_LS| = {h_ls.norm():.3e}")
    return ModelBuild(
        schedule,
        predicted,
        drift=mean_field_drift(schedule),
        notes=tuple(notes),
        raw_generator=raw,
        lamb_shift=h_ls,
        table=table,
    )


def build_composite(
    system_dims: Sequence[int],
    dissipating_site: int,
    local_collision: Sequence[InteractionTerm],
    h_s: Optional[Operator],
    gamma: float,
    g_s: float = 1.0,
    prep: Optional[AncillaPrep] = None,
) -> ModelBuild:
    """
    Composite model: only `dissipating_site` collides with fresh ancillas,
    the other sites are reached through the nonlocal H_S.

    Returns:
        ModelBuild whose predicted dissipator lives on the dissipating site only
    """
    system_dims = as_dims(system_dims)
    if not 0 <= dissipating_site < len(system_dims):
        raise ValueError(f"dissipating_site {dissipating_site} out of range")
    if any(t.site != dissipating_site for t in local_collision):
        raise ValueError("local_collision must act on the dissipating site only")
    prep = prep or ground_qubit_prep()
    system_names = tuple(f"s{i}" for i in range(len(system_dims)))
    generator = local_collision[0].local_generator()
    for t in local_collision[1:]:
        generator = generator + t.local_generator()
    generators: Dict[str, Operator] = {"H_local": generator}
    stages = [
        Stage(StageKind.COLLISION, (f"s{dissipating_site}", "e0"), ((Coupling.INTERACTION, "H_local"),), 1.0, "H_local")
    ]
    _with_system_stage(stages, generators, system_names, h_s)
    schedule = CollisionSchedule(
        system_dims=system_dims,
        prep=prep,
        program=TimestepProgram(tuple(stages)),
        generators=generators,
        scaling=ScalingRule(gamma=gamma, g_s=g_s),
        system_names=system_names,
        name="composite",
    )
    basis = GKSBasis.local(system_dims)
    table = coefficient_table(local_collision, prep.state_operator(), gamma)
    predicted = GKLSSpec(
        basis,
        _system_hamiltonian(system_dims, h_s, g_s),
        _daggered_kossakowski(basis, local_collision, table),
    )
    return ModelBuild(schedule, predicted, drift=mean_field_drift(schedule), table=table)


@dataclass(frozen=True, eq=False)
class EntangledModelSpec:
    """
    Simultaneous local collisions of each site m with its own ancilla, the
    ancillas sharing a (possibly entangled) preparation.

    If `entangler` is set, the timestep starts with U_E = exp(-i g_E H_E dt)
    applied to `prep`.
    """

    system_dims: HilbertDims
    terms: Tuple[InteractionTerm, ...]
    prep: AncillaPrep
    entangler: Optional[Operator] = None

    def __post_init__(self):
        object.__setattr__(self, "system_dims", as_dims(self.system_dims))
        object.__setattr__(self, "terms", tuple(self.terms))
        n_anc = len(self.prep.dims)
        for t in self.terms:
            if not 0 <= t.ancilla < n_anc:
                raise ValueError(f"Term on site {t.site} references ancilla {t.ancilla} of {n_anc}")
            if t.ancilla_op.dims.as_list() != [self.prep.dims[t.ancilla]]:
                raise ValueError(f"Ancilla operator of site {t.site} has the wrong dimension")
        if self.entangler is not None and self.entangler.dims != self.prep.dims:
            raise ValueError("Entangler must act on the full ancilla space")


def effective_ancilla_state(spec: EntangledModelSpec, mu: float, regime: str = "fast") -> Operator:
    """Ancilla state entering the interaction in the small-timestep limit."""
    rho = spec.prep.state_operator()
    if spec.entangler is None or regime == "slow" or mu == 0:
        return rho
    unitary = HermitianPropagator(spec.entangler).at(mu)
    return (unitary @ rho @ unitary.dag()).hermitized()


def predicted_entangled_coefficients(
    spec: EntangledModelSpec, gamma: float, mu: float = 0.0, regime: str = "fast"
) -> CoefficientTable:
    """
    Coefficients gamma Tr[B_{m',a'} B_{m,a} rho_E] of the entangled-ancilla
    model, evaluated on the state the interaction sees, with the
    index-symmetry and modulus reports.
    """
    rho = effective_ancilla_state(spec, mu, regime)
    table = coefficient_table(spec.terms, rho, gamma)
    logger.info(
        f"Entangled coefficients: symmetry defect {table.symmetry_defect:.3e}, "
        f"modulus gap {table.modulus_gap:.3e}"
    )
    return table


def build_entangled(
    spec: EntangledModelSpec,
    gamma: float,
    mu: float = 0.0,
    h_s: Optional[Operator] = None,
    g_s: float = 1.0,
    regime: str = "fast",
    kappa: float = 1.0,
    slow_exponent: float = 0.5,
) -> ModelBuild:
    """
    Entangled-ancilla model: U_S U_I U_E per timestep.

    The predicted Kossakowski matrix is the daggered image of
    gamma Tr[B_k B_j rho_E]. A nonzero ancilla mean of the interaction is
    logged and reported as drift.
    """
    system_names = tuple(f"s{i}" for i in range(len(spec.system_dims)))
    ancilla_names = tuple(f"e{i}" for i in range(len(spec.prep.dims)))
    generators: Dict[str, Operator] = {}
    stages: List[Stage] = []
    if spec.entangler is not None:
        generators["H_E"] = spec.entangler
        stages.append(Stage(StageKind.ANCILLA_UNITARY, ancilla_names, ((Coupling.ENVIRONMENT, "H_E"),), 1.0, "U_E"))
    for site in sorted({t.site for t in spec.terms}):
        site_terms = [t for t in spec.terms if t.site == site]
        ancilla = site_terms[0].ancilla
        if any(t.ancilla != ancilla for t in site_terms):
            raise ValueError(f"Site {site} couples to more than one ancilla")
        generator = site_terms[0].local_generator()
        for t in site_terms[1:]:
            generator = generator + t.local_generator()
        name = f"H_I_s{site}"
        generators[name] = generator
        stages.append(
            Stage(StageKind.COLLISION, (f"s{site}", ancilla_names[ancilla]), ((Coupling.INTERACTION, name),), 1.0, name)
        )
    _with_system_stage(stages, generators, system_names, h_s)
    schedule = CollisionSchedule(
        system_dims=spec.system_dims,
        prep=spec.prep,
        program=TimestepProgram(tuple(stages)),
        generators=generators,
        scaling=ScalingRule(
            gamma=gamma, g_s=g_s, mu=mu, regime=regime, kappa=kappa, slow_exponent=slow_exponent
        ),
        system_names=system_names,
        ancilla_names=ancilla_names,
        name="entangled",
    )
    table = predicted_entangled_coefficients(spec, gamma, mu, regime)
    basis = GKSBasis.local(spec.system_dims)
    predicted = GKLSSpec(
        basis,
        _system_hamiltonian(spec.system_dims, h_s, g_s),
        _daggered_kossakowski(basis, spec.terms, table),
    )
    notes = []
    rho = effective_ancilla_state(spec, mu, regime)
    defect = _zero_mean_defect(spec.terms, rho)
    drift = mean_field_drift(schedule) if regime == "fast" else defect
    if defect > ZERO_MEAN_TOL:
        notes.append("zero_mean_violation")
        logger.warning(f"Entangled ancilla state has nonzero interaction mean ({defect:.3e}); drift {drift:.3e}")
    return ModelBuild(schedule, predicted, drift=drift, notes=tuple(notes), table=table)


def bell_like_entangler() -> Operator:
    """H_E = sigma_x x sigma_x, so U_E(mu)|gg> = cos(mu)|gg> - i sin(mu)|ee>."""
    return kron(sigma_x(), sigma_x())


def qubit_pair_state(b_gg: complex, b_ee: complex) -> Operator:
    """Normalized pure state b_gg|gg> + b_ee|ee> on two ancilla qubits."""
    vec = np.array([b_gg, 0, 0, b_ee], dtype=np.complex128)
    vec = vec / np.linalg.norm(vec)
    return Operator(HilbertDims((2, 2)), np.outer(vec, vec.conj()))


def qubit_emission_terms(n_sites: int) -> List[InteractionTerm]:
    """H_I = sum_m sigma_m^- x sigma_{E,m}^+ + h.c., site m on ancilla m."""
    return [
        InteractionTerm(m, sigma_minus(), sigma_plus(), ancilla=m, label=f"sm{m}")
        for m in range(n_sites)
    ]


def squeezed_closed_form(r: float, psi: float, n1: float, n2: float, gamma: float) -> Dict[str, complex]:
    """
    Closed-form rates of the squeezed-thermal example:
    down_j = gamma (cosh^2 r (N_j + 1) + sinh^2 r N_{j+1}),
    up_j = gamma (cosh^2 r N_j + sinh^2 r (N_{j+1} + 1)),
    cross = gamma cosh r sinh r e^{i psi} (N_1 + N_2 + 1), with N_3 = N_1.
    """
    c2 = math.cosh(r) ** 2
    s2 = math.sinh(r) ** 2
    occupations = (n1, n2, n1)
    out: Dict[str, complex] = {}
    for j in (0, 1):
        nj, nnext = occupations[j], occupations[j + 1]
        out[f"down{j + 1}"] = gamma * (c2 * (nj + 1) + s2 * nnext)
        out[f"up{j + 1}"] = gamma * (c2 * nj + s2 * (nnext + 1))
    out["cross"] = gamma * math.cosh(r) * math.sinh(r) * complex(math.cos(psi), math.sin(psi)) * (n1 + n2 + 1)
    return out


def squeezed_closed_form_spec(r: float, psi: float, n1: float, n2: float, gamma: float) -> GKLSSpec:
    """
    Predicted spec of the squeezed-thermal example. The cross rate multiplies
    sigma_1^+ rho sigma_2^+ (and its mirror); sigma_1^- rho sigma_2^- carries
    the conjugate.
    """
    rates = squeezed_closed_form(r, psi, n1, n2, gamma)
    dims = HilbertDims((2, 2))
    basis = GKSBasis.local(dims)
    sm, sp = sigma_minus(), sigma_plus()
    terms = [(0, sm), (0, sp), (1, sm), (1, sp)]
    table = np.zeros((4, 4), dtype=np.complex128)
    table[0, 1] = rates["down1"]
    table[1, 0] = rates["up1"]
    table[2, 3] = rates["down2"]
    table[3, 2] = rates["up2"]
    table[1, 3] = table[3, 1] = rates["cross"]
    table[0, 2] = table[2, 0] = np.conj(rates["cross"])
    return GKLSSpec(basis, zeros(dims), undaggered_to_daggered(basis, terms, table))


@dataclass(frozen=True, eq=False)
class SqueezedExample:
    build: ModelBuild
    cutoff: int
    closed_form: Dict[str, complex]
    trace_form: Dict[str, complex]
    relative_errors: Dict[str, float]
    truncation_defect: float
    closed_form_spec: GKLSSpec


def squeezed_example(
    r: float,
    psi: float,
    n1: float,
    n2: float,
    gamma: float,
    cutoff: Optional[int] = None,
) -> SqueezedExample:
    """
    Two qubits coupled to a two-mode squeezed thermal ancilla pair through
    H_I = sigma_1^- b_1^dag + sigma_2^- b_2^dag + h.c.

    Raises:
        CutoffInsufficientError: If the chosen cutoff fails the Fock gates
    """
    squeeze = SqueezeParams(r, psi)
    cutoff = cutoff if cutoff is not None else default_cutoff(n1, n2, squeeze.r)
    modes = (FockMode(cutoff), FockMode(cutoff))
    rho_e = entangled_thermal_state(modes, squeeze, n1, n2)
    b = annihilation(modes[0])
    terms = [
        InteractionTerm(0, sigma_minus(), b.dag(), ancilla=0, label="sm0"),
        InteractionTerm(1, sigma_minus(), b.dag(), ancilla=1, label="sm1"),
    ]
    prep = AncillaPrep(rho_e.dims, kind="explicit", state=rho_e)
    spec = EntangledModelSpec(HilbertDims((2, 2)), tuple(terms), prep)
    build = build_entangled(spec, gamma)
    table = build.table
    trace_form = {
        "down1": table.entry("sm0", "sm0^dag"),
        "up1": table.entry("sm0^dag", "sm0"),
        "down2": table.entry("sm1", "sm1^dag"),
        "up2": table.entry("sm1^dag", "sm1"),
        "cross": table.entry("sm0^dag", "sm1^dag"),
    }
    closed = squeezed_closed_form(r, squeeze.psi, n1, n2, gamma)
    errors = {
        key: abs(trace_form[key] - closed[key]) / max(abs(closed[key]), 1e-300)
        for key in closed
        if abs(closed[key]) > 0
    }
    logger.info(
        f"Squeezed example r={r}, psi={psi}, cutoff={cutoff}: max relative error "
        f"{max(errors.values()) if errors else 0.0:.3e}"
    )
    return SqueezedExample(
        build=build,
        cutoff=cutoff,
        closed_form=closed,
        trace_form=trace_form,
        relative_errors=errors,
        truncation_defect=rho_e.truncation_defect,
        closed_form_spec=squeezed_closed_form_spec(r, squeeze.psi, n1, n2, gamma),
    )


def emission_pair_models(lambda1: complex = 1.0, lambda2: complex = 1.0) -> Tuple[GKSBasis, McmAncillaSpec, CascadeSpec]:
    """Two qubits with F_j = sigma_j^-: the MCM brick and the matching cascade."""
    dims = HilbertDims((2, 2))
    basis = GKSBasis.local(dims)
    brick = McmAncillaSpec((0, "sm"), (1, "sm"), lambda1, lambda2)
    cascade = CascadeSpec(
        dims,
        (
            InteractionTerm(0, sigma_minus(), sigma_plus(), weight=lambda1),
            InteractionTerm(1, sigma_minus(), sigma_plus(), weight=lambda2),
        ),
    )
    return basis, brick, cascade


def _cross_and_local_maxima(spec: GKLSSpec) -> Tuple[float, float]:
    cross = 0.0
    local = 0.0
    for a, ea in enumerate(spec.basis.ops):
        for b, eb in enumerate(spec.basis.ops):
            value = abs(spec.kossakowski[a, b])
            if ea.site == eb.site:
                local = max(local, value)
            else:
                cross = max(cross, value)
    return cross, local


@dataclass(frozen=True)
class SlowScanRow:
    dt: float
    max_cross: float
    max_local: float
    ratio: float


@dataclass(frozen=True)
class SlowScan:
    rows: Tuple[SlowScanRow, ...]
    monotone: bool
    fitted_exponent: Optional[float]
    fit_r2: Optional[float]


def slow_environment_scan(
    gamma: float,
    dt_sequence: Sequence[float],
    kappa: float = 1.0,
    slow_exponent: float = 0.5,
) -> SlowScan:
    """
    Entangled qubit-ancilla model with g_E = kappa dt^(-s): ratio of the
    largest cross coefficient to the largest local one of L_dt, per dt.
    """
    check_dt_sequence(dt_sequence)
    spec = EntangledModelSpec(
        HilbertDims((2, 2)), tuple(qubit_emission_terms(2)), ground_qubit_prep(2), bell_like_entangler()
    )
    basis = GKSBasis.local(spec.system_dims)
    schedule = build_entangled(
        spec, gamma, regime="slow", kappa=kappa, slow_exponent=slow_exponent
    ).schedule
    rows = []
    for dt in dt_sequence:
        channel = linearize_map(schedule, dt)
        generator = (channel - Superoperator.identity(schedule.system_dims)) * (1.0 / dt)
        decomposition = decompose_generator(generator, basis)
        cross, local = _cross_and_local_maxima(decomposition.spec)
        rows.append(SlowScanRow(dt=dt, max_cross=cross, max_local=local, ratio=cross / max(local, 1e-300)))
    ratios = [row.ratio for row in rows]
    monotone = all(b < a for a, b in zip(ratios, ratios[1:]))
    exponent, r2 = fit_convergence_order([row.dt for row in rows], ratios)
    if not monotone:
        logger.warning(f"Cross/local ratio is not monotone in dt: {ratios}")
    return SlowScan(rows=tuple(rows), monotone=monotone, fitted_exponent=exponent, fit_r2=r2)
