from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field
from typing import Optional, List, Tuple
import logging

from app.services.operator_core import Operator, OperatorPayload
from app.services.gkls_engine import (
    GKLSSpec,
    GKLSSpecPayload,
    GKSBasis,
    MatrixPayload,
    Superoperator,
    build_liouvillian,
    decompose_generator,
    flow,
)

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/gkls", tags=["gkls"])


class LiouvillianResponse(BaseModel):
    dims: List[int]
    matrix: MatrixPayload
    trace_annihilation_defect: float
    kossakowski_min_eigenvalue: float


class DecomposeRequest(BaseModel):
    dims: List[int]
    matrix: MatrixPayload
    basis: List[Tuple[int, str]] = Field(default_factory=list)


class DecomposeResponse(BaseModel):
    spec: GKLSSpecPayload
    residual: float
    condition_number: float


class PropagateRequest(BaseModel):
    spec: GKLSSpecPayload
    rho0: OperatorPayload
    times: List[float] = Field(..., min_length=1)


class PropagateResponse(BaseModel):
    times: List[float]
    states: List[OperatorPayload]


def _spec(payload: GKLSSpecPayload) -> GKLSSpec:
    try:
        return GKLSSpec.from_payload(payload)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=f"Invalid GKLS spec: {str(e)}")


@router.post("/liouvillian", response_model=LiouvillianResponse)
def liouvillian(payload: GKLSSpecPayload):
    """
    Dense Liouvillian of a GKLS spec on column-stacked states.
    """
    spec = _spec(payload)
    generator = build_liouvillian(spec)
    return LiouvillianResponse(
        dims=spec.dims.as_list(),
        matrix=MatrixPayload.from_array(generator.matrix),
        trace_annihilation_defect=generator.trace_annihilation_defect(),
        kossakowski_min_eigenvalue=spec.min_eigenvalue,
    )


@router.post("/decompose", response_model=DecomposeResponse)
def decompose(request: DecomposeRequest):
    """
    Hamiltonian and Kossakowski matrix of a generator, over the full local
    basis unless `basis` lists (site, label) keys.
    """
    try:
        generator = Superoperator(tuple(request.dims), request.matrix.to_array())
        if request.basis:
            basis = GKSBasis.from_labels(tuple(request.dims), [tuple(k) for k in request.basis])
        else:
            basis = GKSBasis.local(tuple(request.dims))
        result = decompose_generator(generator, basis)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return DecomposeResponse(
        spec=result.spec.to_payload(),
        residual=result.residual,
        condition_number=result.condition_number,
    )


@router.post("/propagate", response_model=PropagateResponse)
def propagate_state(request: PropagateRequest):
    spec = _spec(request.spec)
    try:
        rho0 = Operator.from_payload(request.rho0)
        generator = build_liouvillian(spec)
        states = [flow(generator, t).apply(rho0) for t in request.times]
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return PropagateResponse(times=request.times, states=[s.to_payload() for s in states])
