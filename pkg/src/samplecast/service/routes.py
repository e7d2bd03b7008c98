"""HTTP endpoints wrapping the scenario runner."""

from __future__ import annotations

from fastapi import APIRouter, HTTPException

from ..metrics import rows_to_csv
from ..runner import run_scenario, sweep
from ..scenario import ScenarioError, load_scenario
from .models import (
    RunRequest,
    RunResponse,
    SweepRequest,
    SweepResponse,
    ValidateRequest,
    ValidateResponse,
)

router = APIRouter()


@router.get("/health")
def health() -> dict:
    return {"status": "ok"}


@router.post("/validate", response_model=ValidateResponse)
def validate(req: ValidateRequest) -> ValidateResponse:
    try:
        load_scenario(req.config)
    except ScenarioError as exc:
        return ValidateResponse(valid=False, errors=exc.errors)
    return ValidateResponse(valid=True)


@router.post("/run", response_model=RunResponse)
def run(req: RunRequest) -> RunResponse:
    try:
        scn = load_scenario(req.config)
    except ScenarioError as exc:
        raise HTTPException(status_code=422, detail="; ".join(exc.errors))
    seed = req.seed if req.seed is not None else scn.seed
    rows, _ = run_scenario(scn, seed)
    return RunResponse(
        scenario=scn.name,
        seed=seed,
        rows=rows,
        csv=rows_to_csv(rows, []),
    )


@router.post("/sweep", response_model=SweepResponse)
def run_sweep(req: SweepRequest) -> SweepResponse:
    import yaml

    try:
        scn = load_scenario(req.config)
    except ScenarioError as exc:
        raise HTTPException(status_code=422, detail="; ".join(exc.errors))
    raw = yaml.safe_load(req.config)
    try:
        rows, param_cols = sweep(raw, req.grid, req.seeds, jobs=req.jobs)
    except ScenarioError as exc:
        raise HTTPException(status_code=422, detail="; ".join(exc.errors))
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise HTTPException(status_code=422, detail="bad grid override: %s" % exc)
    return SweepResponse(
        scenario=scn.name,
        runs=len(rows),
        csv=rows_to_csv(rows, param_cols),
    )
