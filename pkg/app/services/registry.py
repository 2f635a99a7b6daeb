import logging
from typing import Any, Callable, Dict, List, Mapping, Optional, Union

import numpy as np

from app.services.operator_core import (
    HilbertDims,
    Operator,
    OperatorPayload,
    identity,
    kron,
    projector,
    sigma_minus,
    sigma_plus,
    sigma_x,
    sigma_y,
    sigma_z,
)
from app.services.fock_space import FockMode, annihilation, number_operator

logger = logging.getLogger(__name__)

OperatorRef = Union[str, Dict[str, Any], OperatorPayload]


def _exchange() -> Operator:
    return kron(sigma_plus(), sigma_minus()) + kron(sigma_minus(), sigma_plus())


BUILTINS: Dict[str, Callable[[], Operator]] = {
    "sigma_minus": sigma_minus,
    "sigma_plus": sigma_plus,
    "sigma_x": sigma_x,
    "sigma_y": sigma_y,
    "sigma_z": sigma_z,
    "excited": lambda: projector(2, 1),
    "exchange": _exchange,
}

PARAMETRIC: Dict[str, Callable[[int], Operator]] = {
    "identity": lambda d: identity(d),
    "ground": lambda d: projector(d, 0),
    "ladder": lambda cutoff: annihilation(FockMode(cutoff)),
    "number": lambda cutoff: number_operator(FockMode(cutoff)),
}


def builtin_names() -> List[str]:
    return sorted(BUILTINS) + [f"{name}:<n>" for name in sorted(PARAMETRIC)]


class OperatorRegistry:
    """
    Resolves operator references: built-in names (sigma_x, ladder:<cutoff>,
    identity:<d>, ...), names defined in a config, and inline
    {dims, re, im} literals.
    """

    def __init__(self, named: Optional[Mapping[str, Any]] = None):
        self._named: Dict[str, Operator] = {}
        for name, payload in (named or {}).items():
            self._named[name] = self._from_literal(payload)

    @staticmethod
    def _from_literal(payload: Any) -> Operator:
        if isinstance(payload, Operator):
            return payload
        if isinstance(payload, OperatorPayload):
            return Operator.from_payload(payload)
        return Operator.from_payload(OperatorPayload.model_validate(payload))

    def names(self) -> List[str]:
        return sorted(self._named) + builtin_names()

    def resolve(self, ref: OperatorRef) -> Operator:
        """
        Args:
            ref: Operator name or inline literal

        Returns:
            The resolved Operator

        Raises:
            ValueError: If the reference does not resolve
        """
        if not isinstance(ref, str):
            return self._from_literal(ref)
        if ref in self._named:
            return self._named[ref]
        if ref in BUILTINS:
            return BUILTINS[ref]()
        base, sep, arg = ref.partition(":")
        if sep and base in PARAMETRIC:
            try:
                size = int(arg)
            except ValueError:
                raise ValueError(f"Operator reference {ref!r} needs an integer argument")
            return PARAMETRIC[base](size)
        raise ValueError(f"Unknown operator {ref!r}; known: {', '.join(self.names())}")

    def check(self, ref: OperatorRef) -> Optional[str]:
        """Returns an error message if `ref` does not resolve."""
        try:
            self.resolve(ref)
        except ValueError as e:
            return str(e)
        return None


def random_parity_state(rng: np.random.Generator) -> Operator:
    """
    Random two-qubit state block-diagonal in excitation parity, so every
    single-ancilla ladder operator has zero mean.
    """
    state = np.zeros((4, 4), dtype=np.complex128)
    weight = rng.uniform(0.2, 0.8)
    for block, w in (([0, 3], weight), ([1, 2], 1.0 - weight)):
        g = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        rho = g @ g.conj().T
        state[np.ix_(block, block)] = w * rho / np.trace(rho)
    return Operator(HilbertDims((2, 2)), state)
