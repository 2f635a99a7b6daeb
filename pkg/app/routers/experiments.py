from fastapi import APIRouter, Depends, HTTPException
from sqlalchemy.orm import Session
from pydantic import BaseModel, Field
from typing import Optional, List, Any, Dict
from datetime import datetime
import json
import logging

from database import get_db, ExperimentRun
from app.services.experiment_runner import (
    ConfigValidationError,
    ScheduleExport,
    config_hash,
    export_config,
    record_run,
    run,
    validate_config,
)

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/experiments", tags=["experiments"])


class ValidateResponse(BaseModel):
    valid: bool
    kind: str
    name: str
    config_hash: str


class RunRequest(BaseModel):
    config: Dict[str, Any]
    seed: Optional[int] = None
    tol_scale: float = Field(1.0, gt=0)
    out_dir: Optional[str] = None
    write: bool = True
    record: bool = True


class VerdictResponse(BaseModel):
    name: str
    passed: bool
    value: float
    tolerance: float
    formula: str


class RunResponse(BaseModel):
    run_id: Optional[int] = None
    name: str
    kind: str
    passed: bool
    output_dir: Optional[str] = None
    verdicts: List[VerdictResponse]
    warnings: List[str]
    provenance: Dict[str, str]


class ExportRequest(BaseModel):
    config: Dict[str, Any]
    dt: float = Field(..., gt=0)
    seed: Optional[int] = None


class RunSummaryResponse(BaseModel):
    id: int
    kind: str
    name: str
    config_hash: str
    library_version: Optional[str]
    passed: bool
    output_dir: Optional[str]
    created_at: Optional[datetime]

    class Config:
        from_attributes = True


class RunDetailResponse(RunSummaryResponse):
    summary: Optional[Dict[str, Any]] = None


def _validation_error(e: ConfigValidationError) -> HTTPException:
    return HTTPException(status_code=422, detail={"errors": e.errors})


@router.post("/validate", response_model=ValidateResponse)
def validate_experiment(config: Dict[str, Any]):
    """
    Validate an experiment config without running it.
    """
    try:
        parsed = validate_config(config)
    except ConfigValidationError as e:
        raise _validation_error(e)
    return ValidateResponse(valid=True, kind=parsed.kind.value, name=parsed.name, config_hash=config_hash(parsed))


@router.post("/run", response_model=RunResponse)
def run_experiment(request: RunRequest, db: Session = Depends(get_db)):
    """
    Run an experiment and record it in the run ledger.
    """
    try:
        config = validate_config(request.config, seed=request.seed)
        bundle = run(config, out_dir=request.out_dir, tol_scale=request.tol_scale, write=request.write)
    except ConfigValidationError as e:
        raise _validation_error(e)
    except ValueError as e:
        logger.error(f"Experiment failed: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Experiment crashed: {e}")
        raise HTTPException(status_code=500, detail=f"Experiment failed: {str(e)}")

    run_id = record_run(bundle, db) if request.record else None
    return RunResponse(
        run_id=run_id,
        name=bundle.name,
        kind=bundle.kind,
        passed=bundle.passed,
        output_dir=bundle.output_dir,
        verdicts=[VerdictResponse(**v.to_dict()) for v in bundle.verdicts],
        warnings=bundle.warnings,
        provenance=bundle.provenance,
    )


@router.post("/export", response_model=ScheduleExport)
def export_experiment(request: ExportRequest):
    """
    Gate list of one timestep of the schedule a config describes.
    """
    try:
        config = validate_config(request.config, seed=request.seed)
        return export_config(config, request.dt)
    except ConfigValidationError as e:
        raise _validation_error(e)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.get("/runs", response_model=List[RunSummaryResponse])
def list_runs(kind: Optional[str] = None, passed: Optional[bool] = None, db: Session = Depends(get_db)):
    query = db.query(ExperimentRun)
    if kind:
        query = query.filter(ExperimentRun.kind == kind)
    if passed is not None:
        query = query.filter(ExperimentRun.passed == passed)
    return query.order_by(ExperimentRun.id.desc()).all()


@router.get("/runs/{run_id}", response_model=RunDetailResponse)
def get_run(run_id: int, db: Session = Depends(get_db)):
    row = db.query(ExperimentRun).filter(ExperimentRun.id == run_id).first()
    if not row:
        raise HTTPException(status_code=404, detail="Run not found")
    result = RunDetailResponse.model_validate(row)
    if row.summary_json:
        try:
            result.summary = json.loads(row.summary_json)
        except (json.JSONDecodeError, TypeError):
            result.summary = None
    return result
