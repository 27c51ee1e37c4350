# Database utility functions
# backend/api/utils/db_utils.py
"""
Helper functions for the run registry, used by the API routes and by the
CLI's --record-run option.
"""

import json
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional

from sqlalchemy.orm import Session
from sqlalchemy.sql import func

from backend.db import models
from backend.db.session import SessionLocal, init_db


def create_run(db: Session, kind: str, env: str, config: Dict[str, Any], source: str = "cli") -> models.ExperimentRun:
    run = models.ExperimentRun(kind=kind, env=env, source=source, config_json=json.dumps(config, sort_keys=True))
    db.add(run)
    db.commit()
    db.refresh(run)
    return run


def add_log(db: Session, run_id: int, message: str, level: str = "INFO") -> models.RunLog:
    entry = models.RunLog(run_id=run_id, level=level, message=message)
    db.add(entry)
    db.commit()
    return entry


def finish_run(
    db: Session,
    run: models.ExperimentRun,
    result: Optional[Dict[str, Any]] = None,
    output_path: Optional[str] = None,
    error: Optional[str] = None,
) -> models.ExperimentRun:
    run.status = "error" if error else "ok"
    run.result_json = None if result is None else json.dumps(result, sort_keys=True)
    run.output_path = output_path
    run.error = error
    run.finished_at = func.now()
    db.commit()
    db.refresh(run)
    return run


def get_run(db: Session, run_id: int) -> Optional[models.ExperimentRun]:
    return db.query(models.ExperimentRun).filter(models.ExperimentRun.run_id == run_id).first()


def list_runs(db: Session, kind: Optional[str] = None, limit: int = 50) -> List[models.ExperimentRun]:
    q = db.query(models.ExperimentRun)
    if kind:
        q = q.filter(models.ExperimentRun.kind == kind)
    return q.order_by(models.ExperimentRun.run_id.desc()).limit(limit).all()


def list_logs(db: Session, run_id: int) -> List[models.RunLog]:
    return db.query(models.RunLog).filter(models.RunLog.run_id == run_id).order_by(models.RunLog.id).all()


def run_to_dict(run: models.ExperimentRun, logs: Optional[List[models.RunLog]] = None) -> Dict[str, Any]:
    out = {
        "run_id": run.run_id,
        "kind": run.kind,
        "env": run.env,
        "source": run.source,
        "status": run.status,
        "config": json.loads(run.config_json),
        "result": None if run.result_json is None else json.loads(run.result_json),
        "output_path": run.output_path,
        "error": run.error,
        "created_at": run.created_at.isoformat() if run.created_at else None,
        "finished_at": run.finished_at.isoformat() if run.finished_at else None,
    }
    if logs is not None:
        out["logs"] = [{"level": entry.level, "message": entry.message} for entry in logs]
    return out


@contextmanager
def recorded_run(kind: str, env: str, config: Dict[str, Any], source: str = "cli") -> Iterator[Dict[str, Any]]:
    """
    Register a run for the duration of the block. The block fills the yielded
    dict with "result" and optionally "output_path"; an exception marks the run
    as failed and is re-raised.
    """
    init_db()
    db = SessionLocal()
    try:
        run = create_run(db, kind, env, config, source)
        slot: Dict[str, Any] = {"run_id": run.run_id}
        try:
            yield slot
        except Exception as e:
            add_log(db, run.run_id, f"{type(e).__name__}: {e}", "ERROR")
            finish_run(db, run, error=f"{type(e).__name__}: {e}")
            raise
        finish_run(db, run, slot.get("result"), slot.get("output_path"))
        add_log(db, run.run_id, f"{kind} finished")
    finally:
        db.close()
