import os
import logging
from dataclasses import dataclass
from functools import reduce
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy import linalg as sla

logger = logging.getLogger(__name__)

MAX_DIMENSION = int(os.environ.get("COLLIDER_MAX_DIMENSION", str(2 ** 14)))
STRUCTURAL_TOL = 1e-10
EQUALITY_TOL = 1e-9

# einsum supports 52 distinct subscripts; two per factor
_EINSUM_LETTERS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"

ComplexArray = NDArray[np.complex128]


class CapacityError(ValueError):
    """Raised when a tensor product exceeds the dense-matrix budget."""


@dataclass(frozen=True)
class HilbertDims:
    """Ordered local dimensions of a tensor-product Hilbert space.

    An empty tuple is allowed and describes the scalar (1x1) space left
    after tracing out every factor.
    """

    dims: Tuple[int, ...] = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        for d in dims:
            if d < 2:
                raise ValueError(f"Local dimensions must be >= 2, got {list(dims)}")
        total = int(np.prod(dims, dtype=np.int64)) if dims else 1
        if total > MAX_DIMENSION:
            raise CapacityError(
                f"Total dimension {total} exceeds the dense budget of {MAX_DIMENSION} rows"
            )
        object.__setattr__(self, "dims", dims)

    @property
    def total(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 1

    def __len__(self) -> int:
        return len(self.dims)

    def __iter__(self):
        return iter(self.dims)

    def __getitem__(self, index: int) -> int:
        return self.dims[index]

    def __add__(self, other: "HilbertDims") -> "HilbertDims":
        return HilbertDims(self.dims + as_dims(other).dims)

    def subset(self, indices: Iterable[int]) -> "HilbertDims":
        return HilbertDims(tuple(self.dims[i] for i in indices))

    def as_list(self) -> List[int]:
        return list(self.dims)


DimsLike = Union[HilbertDims, Sequence[int]]


def as_dims(dims: DimsLike) -> HilbertDims:
    if isinstance(dims, HilbertDims):
        return dims
    return HilbertDims(tuple(dims))


@dataclass(frozen=True, eq=False)
class Operator:
    """Dense complex matrix on a tensor-product space.

    Factor 0 is the slowest index of the row-major layout. The stored array
    is a read-only copy, so operators can be shared freely between threads.
    """

    dims: HilbertDims
    data: ComplexArray

    def __post_init__(self):
        dims = as_dims(self.dims)
        arr = np.array(self.data, dtype=np.complex128, copy=True)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"Operator data must be square, got shape {arr.shape}")
        if arr.shape[0] != dims.total:
            raise ValueError(
                f"Operator side {arr.shape[0]} does not match dims {dims.as_list()} "
                f"(product {dims.total})"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", arr)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def dag(self) -> "Operator":
        return Operator(self.dims, self.data.conj().T)

    def _check_compatible(self, other: "Operator"):
        if self.dims != other.dims:
            raise ValueError(
                f"Dimension mismatch: {self.dims.as_list()} vs {other.dims.as_list()}"
            )

    def __matmul__(self, other: "Operator") -> "Operator":
        self._check_compatible(other)
        return Operator(self.dims, self.data @ other.data)

    def __add__(self, other: "Operator") -> "Operator":
        self._check_compatible(other)
        return Operator(self.dims, self.data + other.data)

    def __sub__(self, other: "Operator") -> "Operator":
        self._check_compatible(other)
        return Operator(self.dims, self.data - other.data)

    def __neg__(self) -> "Operator":
        return Operator(self.dims, -self.data)

    def __mul__(self, scalar: complex) -> "Operator":
        return Operator(self.dims, self.data * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar: complex) -> "Operator":
        return Operator(self.dims, self.data / scalar)

    def trace(self) -> complex:
        return complex(np.trace(self.data))

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def expectation(self, observable: "Operator") -> complex:
        """Returns Tr[observable @ self] for a state `self`."""
        self._check_compatible(observable)
        return complex(np.trace(observable.data @ self.data))

    def hermitian_defect(self) -> float:
        return float(np.linalg.norm(self.data - self.data.conj().T))

    def is_hermitian(self, tol: float = STRUCTURAL_TOL) -> bool:
        scale = max(self.norm(), 1.0)
        return self.hermitian_defect() <= tol * scale

    def unitarity_defect(self) -> float:
        eye = np.eye(self.dim)
        return float(np.linalg.norm(self.data.conj().T @ self.data - eye))

    def is_unitary(self, tol: float = STRUCTURAL_TOL) -> bool:
        return self.unitarity_defect() <= tol

    def min_eigenvalue(self) -> float:
        herm = 0.5 * (self.data + self.data.conj().T)
        return float(np.linalg.eigvalsh(herm)[0])

    def is_density_matrix(self, tol: float = STRUCTURAL_TOL) -> bool:
        if not self.is_hermitian(tol):
            return False
        if abs(self.trace() - 1.0) > tol:
            return False
        return self.min_eigenvalue() >= -tol

    def purity(self) -> float:
        return float(np.real(np.trace(self.data @ self.data)))

    def hermitized(self) -> "Operator":
        return Operator(self.dims, 0.5 * (self.data + self.data.conj().T))

    def to_payload(self) -> "OperatorPayload":
        return OperatorPayload(
            dims=self.dims.as_list(),
            re=self.data.real.tolist(),
            im=self.data.imag.tolist(),
        )

    @classmethod
    def from_payload(cls, payload: "OperatorPayload") -> "Operator":
        data = np.asarray(payload.re, dtype=float) + 1j * np.asarray(payload.im, dtype=float)
        return cls(HilbertDims(tuple(payload.dims)), data)


class OperatorPayload(BaseModel):
    """JSON form of an Operator: {dims, re, im}."""

    dims: List[int] = Field(default_factory=list)
    re: List[List[float]]
    im: Optional[List[List[float]]] = None

    @field_validator("dims")
    @classmethod
    def validate_dims(cls, v: List[int]) -> List[int]:
        if any(d < 2 for d in v):
            raise ValueError("every entry of dims must be >= 2")
        return v

    @model_validator(mode="after")
    def validate_shape(self):
        side = int(np.prod(self.dims)) if self.dims else 1
        if len(self.re) != side or any(len(row) != side for row in self.re):
            raise ValueError(f"re must be a {side}x{side} matrix for dims {self.dims}")
        if self.im is None:
            self.im = [[0.0] * side for _ in range(side)]
        elif len(self.im) != side or any(len(row) != side for row in self.im):
            raise ValueError(f"im must be a {side}x{side} matrix for dims {self.dims}")
        return self


def kron(*operators: Operator) -> Operator:
    """
    Tensor product with the first operand's indices slowest.

    Args:
        operators: Two or more operators

    Returns:
        Operator on the concatenated dims

    Raises:
        CapacityError: If the product exceeds the dense budget
    """
    if not operators:
        raise ValueError("kron needs at least one operand")
    dims = reduce(lambda acc, op: acc + op.dims, operators[1:], operators[0].dims)
    data = reduce(np.kron, (op.data for op in operators[1:]), operators[0].data)
    return Operator(dims, data)


def _check_factor_indices(indices: Iterable[int], n: int, what: str) -> List[int]:
    checked = []
    for i in indices:
        if not isinstance(i, (int, np.integer)) or i < 0 or i >= n:
            raise ValueError(f"Invalid {what} index {i} for {n} factors")
        checked.append(int(i))
    if len(set(checked)) != len(checked):
        raise ValueError(f"Duplicate {what} indices in {checked}")
    return checked


def partial_trace(a: Operator, keep: Iterable[int]) -> Operator:
    """
    Traces out every factor not listed in `keep`.

    Kept factors stay in their original order. An empty keep-set returns the
    full trace as a 1x1 operator.

    Args:
        a: Operator on a tensor-product space
        keep: Indices of the factors to keep

    Returns:
        Reduced operator on the kept factors
    """
    n = len(a.dims)
    kept = sorted(_check_factor_indices(set(keep), n, "factor"))
    if n == 0:
        return a
    tensor = a.data.reshape(a.dims.dims * 2)
    rows = _EINSUM_LETTERS[:n]
    cols = "".join(
        _EINSUM_LETTERS[n + i] if i in kept else rows[i] for i in range(n)
    )
    out = "".join(rows[i] for i in kept) + "".join(cols[i] for i in kept)
    reduced = np.einsum(f"{rows}{cols}->{out}", tensor)
    kept_dims = a.dims.subset(kept)
    return Operator(kept_dims, np.asarray(reduced).reshape(kept_dims.total, kept_dims.total))


def expm(a: Operator, scale: complex = 1.0) -> Operator:
    """
    Matrix exponential exp(scale * a).

    Hermitian and skew-Hermitian arguments go through an eigendecomposition;
    everything else uses scipy's scaling-and-squaring Pade routine.

    Raises:
        ValueError: If the scaled matrix has non-finite entries
    """
    arr = scale * np.asarray(a.data)
    if not np.all(np.isfinite(arr)):
        raise ValueError("expm requires finite matrix entries")
    norm = max(np.linalg.norm(arr), 1.0)
    if np.linalg.norm(arr - arr.conj().T) <= 1e-14 * norm:
        w, v = np.linalg.eigh(0.5 * (arr + arr.conj().T))
        return Operator(a.dims, (v * np.exp(w)) @ v.conj().T)
    if np.linalg.norm(arr + arr.conj().T) <= 1e-14 * norm:
        k = -0.5j * (arr - arr.conj().T)
        w, v = np.linalg.eigh(k)
        return Operator(a.dims, (v * np.exp(1j * w)) @ v.conj().T)
    return Operator(a.dims, sla.expm(arr))


def embed(op: Operator, targets: Sequence[int], dims: DimsLike) -> Operator:
    """
    Embeds an operator acting on the factors `targets` (in that order) into
    the full space, with the identity on every other factor.
    """
    dims = as_dims(dims)
    n = len(dims)
    targets = _check_factor_indices(targets, n, "site")
    expected = [dims[t] for t in targets]
    if op.dims.as_list() != expected:
        raise ValueError(
            f"Operator dims {op.dims.as_list()} do not match target dims {expected}"
        )
    rest = [i for i in range(n) if i not in targets]
    rest_dim = int(np.prod([dims[i] for i in rest])) if rest else 1
    full = np.kron(op.data, np.eye(rest_dim))
    order = targets + rest
    shape = [dims[i] for i in order]
    tensor = full.reshape(shape * 2)
    perm = [order.index(f) for f in range(n)]
    tensor = tensor.transpose(perm + [n + p for p in perm])
    return Operator(dims, tensor.reshape(dims.total, dims.total))


def embed_local(op: Operator, site: int, dims: DimsLike) -> Operator:
    """Embeds a single-factor operator at `site`."""
    dims = as_dims(dims)
    if not 0 <= site < len(dims):
        raise ValueError(f"Site {site} out of range for {len(dims)} factors")
    return embed(op, [site], dims)


def apply_local(
    local: ComplexArray, targets: Sequence[int], dims: DimsLike, block: ComplexArray
) -> ComplexArray:
    """
    Left-multiplies a block of column vectors by an operator that acts only
    on the factors `targets`, without forming the full matrix.

    Args:
        local: Matrix on the target factors (ordered as `targets`)
        targets: Factor indices the operator acts on
        dims: Full space dims
        block: Array of shape (D,) or (D, k)

    Returns:
        Array with the same shape as `block`
    """
    dims = as_dims(dims)
    targets = list(targets)
    vector = block.ndim == 1
    cols = block.reshape(dims.total, -1)
    k = cols.shape[1]
    tdims = [dims[t] for t in targets]
    nt = len(targets)
    tensor = cols.reshape(list(dims.dims) + [k])
    local_tensor = np.asarray(local).reshape(tdims * 2)
    out = np.tensordot(local_tensor, tensor, axes=(list(range(nt, 2 * nt)), targets))
    out = np.moveaxis(out, list(range(nt)), targets)
    out = out.reshape(dims.total, k)
    return out.reshape(-1) if vector else out


class HermitianPropagator:
    """Caches the eigendecomposition of a Hermitian generator H so that
    exp(-i theta H) can be evaluated at any angle."""

    def __init__(self, generator: Operator, tol: float = STRUCTURAL_TOL):
        if not generator.is_hermitian(tol):
            raise ValueError(
                f"Generator is not Hermitian (defect {generator.hermitian_defect():.3e})"
            )
        self.generator = generator
        herm = 0.5 * (generator.data + generator.data.conj().T)
        self._eigvals, self._eigvecs = np.linalg.eigh(herm)

    @property
    def dims(self) -> HilbertDims:
        return self.generator.dims

    def matrix(self, theta: float) -> ComplexArray:
        phases = np.exp(-1j * theta * self._eigvals)
        return (self._eigvecs * phases) @ self._eigvecs.conj().T

    def at(self, theta: float) -> Operator:
        return Operator(self.generator.dims, self.matrix(theta))


def identity(dims: Union[int, DimsLike]) -> Operator:
    if isinstance(dims, (int, np.integer)):
        dims = HilbertDims((int(dims),))
    dims = as_dims(dims)
    return Operator(dims, np.eye(dims.total))


def zeros(dims: DimsLike) -> Operator:
    dims = as_dims(dims)
    return Operator(dims, np.zeros((dims.total, dims.total)))


def basis_ket(d: int, k: int) -> ComplexArray:
    vec = np.zeros(d, dtype=np.complex128)
    vec[k] = 1.0
    return vec


def projector(d: int, k: int) -> Operator:
    vec = basis_ket(d, k)
    return Operator(HilbertDims((d,)), np.outer(vec, vec.conj()))


def pure_state(vector: Sequence[complex], dims: DimsLike) -> Operator:
    vec = np.asarray(vector, dtype=np.complex128)
    vec = vec / np.linalg.norm(vec)
    return Operator(as_dims(dims), np.outer(vec, vec.conj()))


# Index 0 is the ground state; sigma_minus lowers |1> to |0>.
def sigma_minus() -> Operator:
    return Operator(HilbertDims((2,)), np.array([[0, 1], [0, 0]]))


def sigma_plus() -> Operator:
    return Operator(HilbertDims((2,)), np.array([[0, 0], [1, 0]]))


def sigma_x() -> Operator:
    return Operator(HilbertDims((2,)), np.array([[0, 1], [1, 0]]))


def sigma_y() -> Operator:
    return Operator(HilbertDims((2,)), np.array([[0, -1j], [1j, 0]]))


def sigma_z() -> Operator:
    return Operator(HilbertDims((2,)), np.array([[1, 0], [0, -1]]))


def commutator(a: Operator, b: Operator) -> Operator:
    return a @ b - b @ a


def frobenius_distance(a: Operator, b: Operator) -> float:
    return (a - b).norm()


def relative_error(actual: Operator, expected: Operator) -> float:
    return frobenius_distance(actual, expected) / max(expected.norm(), 1e-300)


def random_hermitian(d: int, rng: np.random.Generator) -> Operator:
    raw = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return Operator(HilbertDims((d,)), 0.5 * (raw + raw.conj().T))


def random_density_matrix(
    dims: Union[int, DimsLike], rng: np.random.Generator, rank: Optional[int] = None
) -> Operator:
    """Random full- or fixed-rank density matrix from a Ginibre draw."""
    if isinstance(dims, (int, np.integer)):
        dims = HilbertDims((int(dims),))
    dims = as_dims(dims)
    d = dims.total
    rank = rank or d
    g = rng.normal(size=(d, rank)) + 1j * rng.normal(size=(d, rank))
    rho = g @ g.conj().T
    return Operator(dims, rho / np.trace(rho))


def random_unitary(d: int, rng: np.random.Generator) -> Operator:
    raw = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    q, r = np.linalg.qr(raw)
    q = q * (np.diag(r) / np.abs(np.diag(r)))
    return Operator(HilbertDims((d,)), q)
