# backend/api/routes/experiment_routes.py
"""
API endpoints for experiment sweeps. A POST registers the run and executes
it as a background task; the registry row is polled through GET.
"""

import logging
from pathlib import Path
from typing import List, Literal, Optional

from fastapi import APIRouter, BackgroundTasks, Depends, HTTPException
from pydantic import Field
from sqlalchemy.orm import Session

from backend.api.routes.estimate_routes import EstimateRequest
from backend.api.utils import db_utils
from backend.db.session import SessionLocal, get_db
from ope_pipeline import settings
from ope_pipeline.bench.config import ExperimentConfig
from ope_pipeline.bench.runs import sweep_run, tune_run
from ope_pipeline.errors import OpeError

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/experiments", tags=["experiments"])

ExperimentKind = Literal["ci-sweep", "coverage", "adversarial", "batch-compare", "tune-rho"]


class ExperimentRequest(EstimateRequest):
    episodes_grid: Optional[List[int]] = None
    horizons_grid: Optional[List[int]] = None
    trials: Optional[int] = Field(None, ge=1)
    n_jobs: Optional[int] = None

    def to_config(self, experiment: str) -> ExperimentConfig:
        base = EstimateRequest.model_validate(
            self.model_dump(exclude={"episodes_grid", "horizons_grid", "trials", "n_jobs"})
        ).to_config(experiment)
        updates = {
            "episodes": self.episodes_grid,
            "horizons": self.horizons_grid,
            "trials": self.trials,
            "n_jobs": self.n_jobs,
        }
        return ExperimentConfig.model_validate({**base.model_dump(), **{k: v for k, v in updates.items() if v}})


def execute_run(run_id: int, cfg: ExperimentConfig) -> None:
    """Run a registered experiment and store its summary (or failure)."""
    db = SessionLocal()
    try:
        run = db_utils.get_run(db, run_id)
        db_utils.add_log(db, run_id, f"{cfg.experiment} started")
        try:
            if cfg.experiment == "tune-rho":
                result, path = tune_run(cfg).to_record(), None
            else:
                table, result = sweep_run(cfg, progress=False)
                path = str(table.write(Path(settings.RESULTS_DIR) / f"{cfg.experiment}-{run_id}.csv"))
        except OpeError as e:
            logger.warning(f"[API] run {run_id} failed: {e}")
            db_utils.add_log(db, run_id, f"{type(e).__name__}: {e}", "ERROR")
            db_utils.finish_run(db, run, error=f"{type(e).__name__}: {e}")
            return
        db_utils.finish_run(db, run, result, path)
        db_utils.add_log(db, run_id, f"{cfg.experiment} finished")
        logger.info(f"[API] run {run_id} finished")
    finally:
        db.close()


@router.post("/{kind}", status_code=202)
def start_experiment(
    kind: ExperimentKind,
    req: ExperimentRequest,
    background_tasks: BackgroundTasks,
    db: Session = Depends(get_db),
):
    cfg = req.to_config(kind)
    run = db_utils.create_run(db, kind, cfg.env, cfg.record(), source="api")
    background_tasks.add_task(execute_run, run.run_id, cfg)
    logger.info(f"[API] queued {kind} as run {run.run_id}")
    return {"run_id": run.run_id, "status": run.status}


@router.get("/list")
def list_experiments(kind: Optional[str] = None, limit: int = 50, db: Session = Depends(get_db)):
    return [db_utils.run_to_dict(r) for r in db_utils.list_runs(db, kind, limit)]


@router.get("/{run_id}")
def get_experiment(run_id: int, db: Session = Depends(get_db)):
    run = db_utils.get_run(db, run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return db_utils.run_to_dict(run, db_utils.list_logs(db, run_id))
