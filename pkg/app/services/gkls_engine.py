import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, Field
from scipy import linalg as sla

from app.services.operator_core import (
    EQUALITY_TOL,
    STRUCTURAL_TOL,
    DimsLike,
    HilbertDims,
    Operator,
    OperatorPayload,
    as_dims,
    embed_local,
    identity,
    zeros,
)

logger = logging.getLogger(__name__)

BASIS_TOL = 1e-12
MAX_GRAM_CONDITION = 1e12
TRACE_ANNIHILATION_TOL = 1e-6

BasisKey = Tuple[int, str]


class DecompositionError(ValueError):
    """Raised when a generator cannot be projected onto a GKLS form."""


def vec(matrix: NDArray) -> NDArray:
    """Column-stacking vectorization."""
    return np.asarray(matrix).flatten(order="F")


def unvec(vector: NDArray, dim: int) -> NDArray:
    return np.asarray(vector).reshape(dim, dim, order="F")


def _matrix_unit(d: int, i: int, j: int) -> NDArray:
    unit = np.zeros((d, d), dtype=np.complex128)
    unit[i, j] = 1.0
    return unit


def _diagonal_traceless(d: int, k: int) -> NDArray:
    diag = np.zeros(d)
    diag[:k] = 1.0
    diag[k] = -k
    return np.diag(diag / math.sqrt(k * (k + 1))).astype(np.complex128)


def local_gks_operators(d: int) -> List[Tuple[str, Operator]]:
    """
    Full orthonormal traceless basis for one factor of dimension d.

    Qubits use the ladder basis (sm, sp, sz); larger factors use off-diagonal
    matrix units E<i><j> plus traceless diagonals D<k>.
    """
    dims = HilbertDims((d,))
    if d == 2:
        return [
            ("sm", Operator(dims, _matrix_unit(2, 0, 1))),
            ("sp", Operator(dims, _matrix_unit(2, 1, 0))),
            ("sz", Operator(dims, _diagonal_traceless(2, 1))),
        ]
    width = len(str(d - 1))
    ops = []
    for i in range(d):
        for j in range(d):
            if i != j:
                ops.append((f"E{i:0{width}d}{j:0{width}d}", Operator(dims, _matrix_unit(d, i, j))))
    for k in range(1, d):
        ops.append((f"D{k:0{width}d}", Operator(dims, _diagonal_traceless(d, k))))
    return ops


def hermitian_basis(d: int) -> List[NDArray]:
    """Orthonormal traceless Hermitian basis (generalized Gell-Mann) of size d^2-1."""
    basis = []
    for j in range(d):
        for k in range(j + 1, d):
            sym = _matrix_unit(d, j, k) + _matrix_unit(d, k, j)
            asym = -1j * _matrix_unit(d, j, k) + 1j * _matrix_unit(d, k, j)
            basis.append(sym / math.sqrt(2))
            basis.append(asym / math.sqrt(2))
    for k in range(1, d):
        basis.append(_diagonal_traceless(d, k))
    return basis


@dataclass(frozen=True)
class GKSOperator:
    site: int
    label: str
    op: Operator

    @property
    def key(self) -> BasisKey:
        return (self.site, self.label)


@dataclass(frozen=True, eq=False)
class GKSBasis:
    """
    Ordered list of local, traceless, locally orthonormal jump operators on a
    multipartite system. Order is the row/column order of any Kossakowski
    matrix written in this basis.
    """

    dims: HilbertDims
    ops: Tuple[GKSOperator, ...]
    _embedded: List[Operator] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        dims = as_dims(self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "ops", tuple(self.ops))
        keys = [op.key for op in self.ops]
        if len(set(keys)) != len(keys):
            raise ValueError(f"Duplicate GKS operator keys in {keys}")
        per_site: Dict[int, List[GKSOperator]] = {}
        for entry in self.ops:
            if not 0 <= entry.site < len(dims):
                raise ValueError(f"GKS operator {entry.key} references site outside {dims.as_list()}")
            if entry.op.dims.as_list() != [dims[entry.site]]:
                raise ValueError(
                    f"GKS operator {entry.key} has dims {entry.op.dims.as_list()}, "
                    f"expected [{dims[entry.site]}]"
                )
            if abs(entry.op.trace()) > BASIS_TOL:
                raise ValueError(f"GKS operator {entry.key} is not traceless")
            per_site.setdefault(entry.site, []).append(entry)
        for site, entries in per_site.items():
            d = dims[site]
            if len(entries) > d * d - 1:
                raise ValueError(f"Site {site} carries more than {d * d - 1} GKS operators")
            stacked = np.array([e.op.data.reshape(-1) for e in entries])
            gram = stacked.conj() @ stacked.T
            if np.max(np.abs(gram - np.eye(len(entries)))) > BASIS_TOL:
                raise ValueError(f"GKS operators on site {site} are not orthonormal")
        object.__setattr__(
            self, "_embedded", [embed_local(e.op, e.site, dims) for e in self.ops]
        )

    @classmethod
    def local(cls, dims: DimsLike, sites: Optional[Sequence[int]] = None) -> "GKSBasis":
        """Complete local basis on the given sites (all sites by default)."""
        dims = as_dims(dims)
        sites = range(len(dims)) if sites is None else sites
        ops = [
            GKSOperator(site, label, op)
            for site in sites
            for label, op in local_gks_operators(dims[site])
        ]
        return cls(dims, tuple(ops))

    @classmethod
    def from_labels(cls, dims: DimsLike, keys: Sequence[BasisKey]) -> "GKSBasis":
        dims = as_dims(dims)
        lookup = {}
        for site in {k[0] for k in keys}:
            if not 0 <= site < len(dims):
                raise ValueError(f"Site {site} out of range for {len(dims)} factors")
            for label, op in local_gks_operators(dims[site]):
                lookup[(site, label)] = op
        missing = [k for k in keys if tuple(k) not in lookup]
        if missing:
            raise ValueError(f"Unknown GKS labels {missing}")
        return cls(dims, tuple(GKSOperator(s, l, lookup[(s, l)]) for s, l in keys))

    @property
    def size(self) -> int:
        return len(self.ops)

    @property
    def keys(self) -> List[BasisKey]:
        return [op.key for op in self.ops]

    def index(self, site: int, label: str) -> int:
        try:
            return self.keys.index((site, label))
        except ValueError:
            raise ValueError(f"No GKS operator ({site}, {label}) in basis")

    def embedded(self, i: int) -> Operator:
        return self._embedded[i]

    def embedded_ops(self) -> List[Operator]:
        return list(self._embedded)

    def subset(self, keys: Sequence[BasisKey]) -> "GKSBasis":
        by_key = {op.key: op for op in self.ops}
        return GKSBasis(self.dims, tuple(by_key[tuple(k)] for k in keys))

    def union(self, other: "GKSBasis") -> "GKSBasis":
        """Operators of both bases; shared keys are kept once, in self's order."""
        if self.dims.as_list() != other.dims.as_list():
            raise ValueError(f"Cannot join bases on {self.dims.as_list()} and {other.dims.as_list()}")
        seen = set(self.keys)
        extra = tuple(e for e in other.ops if e.key not in seen)
        return GKSBasis(self.dims, self.ops + extra)

    def canonical(self) -> "GKSBasis":
        return GKSBasis(self.dims, tuple(sorted(self.ops, key=lambda e: e.key)))

    def coefficients(self, site: int, op: Operator) -> NDArray:
        """
        Expansion coefficients c_a = Tr[F_a^dag op] of a local operator.

        Raises:
            ValueError: If op is not in the span of the basis operators on `site`
        """
        coeffs = np.zeros(self.size, dtype=np.complex128)
        rebuilt = np.zeros_like(op.data)
        for a, entry in enumerate(self.ops):
            if entry.site == site:
                coeffs[a] = np.trace(entry.op.data.conj().T @ op.data)
                rebuilt = rebuilt + coeffs[a] * entry.op.data
        defect = np.linalg.norm(rebuilt - op.data)
        if defect > STRUCTURAL_TOL * max(1.0, op.norm()):
            raise ValueError(
                f"Operator on site {site} is outside the span of the basis (defect {defect:.3e})"
            )
        return coeffs

    def to_payload(self) -> List["GKSOperatorPayload"]:
        return [
            GKSOperatorPayload(site=e.site, label=e.label, op=e.op.to_payload())
            for e in self.ops
        ]

    @classmethod
    def from_payload(cls, dims: DimsLike, entries: Sequence["GKSOperatorPayload"]) -> "GKSBasis":
        return cls(
            as_dims(dims),
            tuple(GKSOperator(e.site, e.label, Operator.from_payload(e.op)) for e in entries),
        )


class GKSOperatorPayload(BaseModel):
    site: int = Field(..., ge=0)
    label: str
    op: OperatorPayload


class MatrixPayload(BaseModel):
    re: List[List[float]]
    im: List[List[float]]

    @classmethod
    def from_array(cls, arr: NDArray) -> "MatrixPayload":
        arr = np.asarray(arr, dtype=np.complex128)
        return cls(re=arr.real.tolist(), im=arr.imag.tolist())

    def to_array(self) -> NDArray:
        return np.asarray(self.re, dtype=float) + 1j * np.asarray(self.im, dtype=float)


class GKLSSpecPayload(BaseModel):
    dims: List[int]
    H_eff: OperatorPayload
    basis: List[GKSOperatorPayload]
    kossakowski: MatrixPayload


@dataclass(frozen=True, eq=False)
class GKLSSpec:
    """Effective Hamiltonian plus Kossakowski matrix over a GKS basis."""

    basis: GKSBasis
    h_eff: Operator
    kossakowski: NDArray

    def __post_init__(self):
        gamma = np.array(self.kossakowski, dtype=np.complex128, copy=True)
        n = self.basis.size
        if gamma.shape != (n, n):
            raise ValueError(f"Kossakowski matrix must be {n}x{n}, got {gamma.shape}")
        if self.h_eff.dims != self.basis.dims:
            raise ValueError(
                f"H_eff dims {self.h_eff.dims.as_list()} do not match basis dims "
                f"{self.basis.dims.as_list()}"
            )
        if not self.h_eff.is_hermitian(STRUCTURAL_TOL):
            raise ValueError(f"H_eff is not Hermitian (defect {self.h_eff.hermitian_defect():.3e})")
        scale = max(1.0, float(np.linalg.norm(gamma)))
        if np.linalg.norm(gamma - gamma.conj().T) > STRUCTURAL_TOL * scale:
            raise ValueError("Kossakowski matrix is not Hermitian")
        gamma.setflags(write=False)
        object.__setattr__(self, "kossakowski", gamma)

    @property
    def dims(self) -> HilbertDims:
        return self.basis.dims

    @property
    def min_eigenvalue(self) -> float:
        if self.basis.size == 0:
            return 0.0
        herm = 0.5 * (self.kossakowski + self.kossakowski.conj().T)
        return float(np.linalg.eigvalsh(herm)[0])

    def is_psd(self, tol: float = STRUCTURAL_TOL) -> bool:
        return self.min_eigenvalue >= -tol

    def coefficient(self, row: BasisKey, col: BasisKey) -> complex:
        return complex(self.kossakowski[self.basis.index(*row), self.basis.index(*col)])

    def block(self, rows: Sequence[BasisKey], cols: Sequence[BasisKey]) -> NDArray:
        ri = [self.basis.index(*k) for k in rows]
        ci = [self.basis.index(*k) for k in cols]
        return self.kossakowski[np.ix_(ri, ci)]

    def reindexed(self, target: GKSBasis) -> "GKLSSpec":
        """
        Rewrites the Kossakowski matrix in another basis spanning the jump
        operators of this one: gamma' = C^T gamma C^*, C[a, b] = Tr[G_b^dag F_a].
        """
        if target.dims != self.dims:
            raise ValueError("Target basis lives on different dims")
        change = np.zeros((self.basis.size, target.size), dtype=np.complex128)
        for a, entry in enumerate(self.basis.ops):
            change[a] = target.coefficients(entry.site, entry.op)
        gamma = change.T @ self.kossakowski @ change.conj()
        return GKLSSpec(target, self.h_eff, gamma)

    def canonical(self) -> "GKLSSpec":
        canonical_basis = self.basis.canonical()
        order = [self.basis.index(*k) for k in canonical_basis.keys]
        return GKLSSpec(canonical_basis, self.h_eff, self.kossakowski[np.ix_(order, order)])

    def to_payload(self) -> GKLSSpecPayload:
        return GKLSSpecPayload(
            dims=self.dims.as_list(),
            H_eff=self.h_eff.to_payload(),
            basis=self.basis.to_payload(),
            kossakowski=MatrixPayload.from_array(self.kossakowski),
        )

    @classmethod
    def from_payload(cls, payload: GKLSSpecPayload) -> "GKLSSpec":
        basis = GKSBasis.from_payload(payload.dims, payload.basis)
        return cls(basis, Operator.from_payload(payload.H_eff), payload.kossakowski.to_array())


@dataclass(frozen=True, eq=False)
class Superoperator:
    """Matrix acting on column-stacked density matrices of a system."""

    dims: HilbertDims
    matrix: NDArray

    def __post_init__(self):
        dims = as_dims(self.dims)
        mat = np.array(self.matrix, dtype=np.complex128, copy=True)
        side = dims.total ** 2
        if mat.shape != (side, side):
            raise ValueError(f"Superoperator must be {side}x{side}, got {mat.shape}")
        mat.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "matrix", mat)

    @property
    def dim(self) -> int:
        return self.dims.total

    @classmethod
    def identity(cls, dims: DimsLike) -> "Superoperator":
        dims = as_dims(dims)
        return cls(dims, np.eye(dims.total ** 2))

    def apply(self, rho: Operator) -> Operator:
        if rho.dims != self.dims:
            raise ValueError("State dims do not match superoperator dims")
        return Operator(self.dims, unvec(self.matrix @ vec(rho.data), self.dim))

    def _binary(self, other: "Superoperator", fn) -> "Superoperator":
        if other.dims != self.dims:
            raise ValueError("Superoperator dims differ")
        return Superoperator(self.dims, fn(self.matrix, other.matrix))

    def __add__(self, other: "Superoperator") -> "Superoperator":
        return self._binary(other, np.add)

    def __sub__(self, other: "Superoperator") -> "Superoperator":
        return self._binary(other, np.subtract)

    def __matmul__(self, other: "Superoperator") -> "Superoperator":
        return self._binary(other, np.matmul)

    def __mul__(self, scalar: complex) -> "Superoperator":
        return Superoperator(self.dims, self.matrix * scalar)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.linalg.norm(self.matrix))

    def trace_row(self) -> NDArray:
        return vec(np.eye(self.dim)).conj() @ self.matrix

    def trace_annihilation_defect(self) -> float:
        """||vec(I)^dag L||, zero for trace-annihilating generators."""
        return float(np.linalg.norm(self.trace_row()))

    def trace_defect(self) -> float:
        """Trace-preservation defect of a channel matrix."""
        return float(np.linalg.norm(self.trace_row() - vec(np.eye(self.dim))))

    def choi(self) -> NDArray:
        """Choi matrix sum_pq |p><q| x Phi(|p><q|)."""
        d = self.dim
        tensor = self.matrix.reshape(d, d, d, d)
        return tensor.transpose(3, 1, 2, 0).reshape(d * d, d * d)

    def min_choi_eigenvalue(self) -> float:
        choi = self.choi()
        return float(np.linalg.eigvalsh(0.5 * (choi + choi.conj().T))[0])

    def eigenvalues(self) -> NDArray:
        return np.linalg.eigvals(self.matrix)


def hamiltonian_superoperator(h: Operator) -> Superoperator:
    eye = np.eye(h.dim)
    return Superoperator(h.dims, -1j * (np.kron(eye, h.data) - np.kron(h.data.T, eye)))


def _dissipator_matrix(fj: NDArray, fk: NDArray) -> NDArray:
    eye = np.eye(fj.shape[0])
    product = fk.conj().T @ fj
    return (
        np.kron(fk.conj(), fj)
        - 0.5 * np.kron(eye, product)
        - 0.5 * np.kron(product.T, eye)
    )


def dissipator_superoperator(fj: Operator, fk: Operator) -> Superoperator:
    """Superoperator of rho -> F_j rho F_k^dag - 1/2 {F_k^dag F_j, rho}."""
    return Superoperator(fj.dims, _dissipator_matrix(fj.data, fk.data))


def sandwich_superoperator(left: Operator, right: Operator) -> Superoperator:
    """Superoperator of rho -> left rho right."""
    return Superoperator(left.dims, np.kron(right.data.T, left.data))


def build_liouvillian(spec: GKLSSpec) -> Superoperator:
    """
    Liouvillian of a GKLS spec.

    Args:
        spec: Hamiltonian, basis and Kossakowski matrix (PSD not required)

    Returns:
        Superoperator of -i[H, rho] + sum_jk gamma_jk (F_j rho F_k^dag - 1/2 {F_k^dag F_j, rho})
    """
    matrix = hamiltonian_superoperator(spec.h_eff).matrix.copy()
    ops = spec.basis.embedded_ops()
    rows, cols = np.nonzero(spec.kossakowski)
    for j, k in zip(rows, cols):
        matrix += spec.kossakowski[j, k] * _dissipator_matrix(ops[j].data, ops[k].data)
    return Superoperator(spec.dims, matrix)


def flow(liouvillian: Superoperator, t: float) -> Superoperator:
    """The semigroup element exp(L t)."""
    if not np.isfinite(t):
        raise ValueError(f"Propagation time must be finite, got {t}")
    return Superoperator(liouvillian.dims, sla.expm(liouvillian.matrix * t))


def propagate(liouvillian: Superoperator, rho0: Operator, t: float) -> Operator:
    """
    Applies exp(L t) to a density matrix.

    Raises:
        ValueError: If t is not finite
    """
    if not np.isfinite(t):
        raise ValueError(f"Propagation time must be finite, got {t}")
    if t == 0:
        return rho0
    return flow(liouvillian, t).apply(rho0)


@dataclass(frozen=True, eq=False)
class Decomposition:
    spec: GKLSSpec
    residual: float
    condition_number: float


def decompose_generator(
    liouvillian: Superoperator,
    basis: GKSBasis,
    max_condition: float = MAX_GRAM_CONDITION,
) -> Decomposition:
    """
    Projects a generator onto Hamiltonian commutators and basis dissipators
    by complex least squares.

    The Hamiltonian is expanded in a traceless Hermitian basis, so any
    identity component of the generator ends up in the residual.

    Args:
        liouvillian: Trace-annihilating generator
        basis: GKS basis for the dissipative part
        max_condition: Limit on the Gram condition number

    Returns:
        Decomposition with the recovered spec and the Frobenius residual

    Raises:
        DecompositionError: If the generator is not trace-annihilating or the
            projection is ill-conditioned
    """
    if basis.dims != liouvillian.dims:
        raise DecompositionError("Basis dims do not match the generator")
    defect = liouvillian.trace_annihilation_defect()
    if defect > TRACE_ANNIHILATION_TOL * max(1.0, liouvillian.norm()):
        raise DecompositionError(f"Generator is not trace-annihilating (defect {defect:.3e})")

    d = liouvillian.dim
    herm_basis = hermitian_basis(d)
    ops = [op.data for op in basis.embedded_ops()]
    columns = [
        hamiltonian_superoperator(Operator(liouvillian.dims, g)).matrix.reshape(-1)
        for g in herm_basis
    ]
    for fj in ops:
        for fk in ops:
            columns.append(_dissipator_matrix(fj, fk).reshape(-1))
    design = np.array(columns).T
    target = liouvillian.matrix.reshape(-1)

    singular = np.linalg.svd(design, compute_uv=False)
    if singular[-1] == 0:
        condition = math.inf
    else:
        condition = float((singular[0] / singular[-1]) ** 2)
    if condition > max_condition:
        raise DecompositionError(
            f"Ill-conditioned projection: Gram condition number {condition:.3e} exceeds {max_condition:.1e}"
        )

    solution, *_ = np.linalg.lstsq(design, target, rcond=None)
    n_h = len(herm_basis)
    h_coeffs = np.real(solution[:n_h])
    h_eff = sum((c * g for c, g in zip(h_coeffs, herm_basis)), np.zeros((d, d), dtype=np.complex128))
    gamma = solution[n_h:].reshape(basis.size, basis.size)
    gamma = 0.5 * (gamma + gamma.conj().T)

    spec = GKLSSpec(basis, Operator(liouvillian.dims, h_eff), gamma)
    residual = (build_liouvillian(spec) - liouvillian).norm()
    logger.info(
        f"Decomposed generator on dims {liouvillian.dims.as_list()}: residual {residual:.3e}, "
        f"condition {condition:.3e}"
    )
    return Decomposition(spec=spec, residual=residual, condition_number=condition)


def _pair_sum(cross: NDArray, left_ops: Sequence[Operator], right_ops: Sequence[Operator]):
    cross = np.asarray(cross, dtype=np.complex128)
    if cross.shape != (len(left_ops), len(right_ops)):
        raise ValueError(
            f"Cross block shape {cross.shape} does not match {len(left_ops)}x{len(right_ops)} operators"
        )
    for a, fa in enumerate(left_ops):
        for b, fb in enumerate(right_ops):
            if cross[a, b] != 0:
                yield cross[a, b], fa, fb


def lamb_shift(
    cross: NDArray, left_ops: Sequence[Operator], right_ops: Sequence[Operator]
) -> Operator:
    """
    Lamb-shift Hamiltonian of a causal cross block.

    Args:
        cross: Kossakowski entries gamma[a, b] between earlier-site operators
            F_a (rows) and later-site operators F_b (columns)
        left_ops: Embedded F_a
        right_ops: Embedded F_b

    Returns:
        sum_ab (gamma_ab F_a F_b^dag - gamma_ab^* F_b F_a^dag) / (2i)
    """
    dims = (left_ops or right_ops)[0].dims if (left_ops or right_ops) else HilbertDims(())
    total = zeros(dims)
    for g, fa, fb in _pair_sum(cross, left_ops, right_ops):
        total = total + (g * (fa @ fb.dag()) - np.conj(g) * (fb @ fa.dag())) / 2j
    return total.hermitized()


def global_dissipator(
    cross: NDArray, left_ops: Sequence[Operator], right_ops: Sequence[Operator]
) -> Superoperator:
    """
    Causal cross dissipator left by a sequential sweep over two sites:
    rho -> sum_ab gamma_ab F_a [rho, F_b^dag] - gamma_ab^* [rho, F_b] F_a^dag.
    """
    dims = (left_ops or right_ops)[0].dims
    d = dims.total
    eye = np.eye(d)
    matrix = np.zeros((d * d, d * d), dtype=np.complex128)
    for g, fa, fb in _pair_sum(cross, left_ops, right_ops):
        a, b = fa.data, fb.data
        matrix += g * (np.kron(b.conj(), a) - np.kron(eye, a @ b.conj().T))
        matrix += np.conj(g) * (np.kron(a.conj(), b) - np.kron((b @ a.conj().T).T, eye))
    return Superoperator(dims, matrix)


def undaggered_to_daggered(
    basis: GKSBasis, terms: Sequence[Tuple[int, Operator]], table: NDArray
) -> NDArray:
    """
    Translates a coefficient table written without daggers,
    sum_jk t_jk (A_j rho A_k - 1/2 {A_k A_j, rho}), into the Kossakowski matrix
    of `basis`: gamma_ab = sum_jk c_ja t_jk conj(d_kb), with A_j = sum_a c_ja F_a
    and A_k^dag = sum_b d_kb F_b.

    Args:
        basis: Target GKS basis
        terms: (site, local operator) for each A_j
        table: Square coefficient table t_jk
    """
    table = np.asarray(table, dtype=np.complex128)
    if table.shape != (len(terms), len(terms)):
        raise ValueError("Coefficient table does not match the number of terms")
    left = np.array([basis.coefficients(site, op) for site, op in terms])
    right = np.array([basis.coefficients(site, op.dag()) for site, op in terms])
    return left.T @ table @ right.conj()


@dataclass(frozen=True)
class SpecComparison:
    hamiltonian_error: float
    kossakowski_error: float
    kossakowski_relative: float
    liouvillian_error: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "hamiltonian_error": self.hamiltonian_error,
            "kossakowski_error": self.kossakowski_error,
            "kossakowski_relative": self.kossakowski_relative,
            "liouvillian_error": self.liouvillian_error,
        }


def traceless_part(op: Operator) -> Operator:
    return op - identity(op.dims) * (op.trace() / op.dim)


def compare_specs(actual: GKLSSpec, expected: GKLSSpec) -> SpecComparison:
    """Diffs two specs after re-indexing both into the canonical full local basis."""
    if actual.dims != expected.dims:
        raise ValueError("Specs live on different dims")
    common = GKSBasis.local(actual.dims)
    a = actual.reindexed(common)
    b = expected.reindexed(common)
    diff = float(np.linalg.norm(a.kossakowski - b.kossakowski))
    scale = max(float(np.linalg.norm(b.kossakowski)), 1e-300)
    return SpecComparison(
        hamiltonian_error=(traceless_part(a.h_eff) - traceless_part(b.h_eff)).norm(),
        kossakowski_error=diff,
        kossakowski_relative=diff / scale,
        liouvillian_error=(build_liouvillian(a) - build_liouvillian(b)).norm(),
    )


def specs_match(actual: GKLSSpec, expected: GKLSSpec, tol: float = EQUALITY_TOL) -> bool:
    result = compare_specs(actual, expected)
    return result.hamiltonian_error <= tol and result.kossakowski_error <= tol
