# backend/api/routes/estimate_routes.py
"""
API endpoints for benchmark environments and single-dataset estimates:
robust/optimistic OPE bounds, adversarial estimation and batch policy
optimisation. Library errors are mapped to HTTP codes in backend.main.
"""

import logging
from typing import Any, Dict, Literal, Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, ConfigDict, Field

from backend.api.utils.db_utils import recorded_run
from ope_pipeline import settings
from ope_pipeline.bench.config import ExperimentConfig, build_config
from ope_pipeline.bench.runs import adversarial_run, batch_run, ope_run
from ope_pipeline.mdp_model.environments import ENVIRONMENTS, describe_env

logger = logging.getLogger(__name__)

router = APIRouter(tags=["estimate"])


class EstimateRequest(BaseModel):
    """Subset of ExperimentConfig accepted over HTTP (no file paths)."""

    model_config = ConfigDict(extra="forbid")

    env: Literal["mrp", "hmp"] = "mrp"
    behavior: Optional[str] = None
    epsilon: Optional[float] = None
    gamma: Optional[float] = None
    alpha: Optional[float] = None
    episodes: Optional[int] = Field(None, ge=1)
    horizon: Optional[int] = Field(None, ge=1)
    seed: Optional[int] = None
    radius: Optional[float] = None
    radii: Optional[Dict[str, float]] = None
    radius_scale: Optional[float] = None
    corrected: Optional[bool] = None
    clip_values: Optional[bool] = None
    episode_length: Optional[int] = Field(None, ge=1)
    missing_state: Optional[Literal["error", "bound"]] = None
    rollouts: Optional[int] = None
    record: bool = False

    def to_config(self, experiment: str) -> ExperimentConfig:
        flags = self.model_dump(exclude={"record", "episodes", "horizon"})
        flags["experiment"] = experiment
        if self.episodes is not None:
            flags["episodes"] = [self.episodes]
        if self.horizon is not None:
            flags["horizons"] = [self.horizon]
        return build_config(flags)


class BatchRequest(EstimateRequest):
    method: Literal["robust", "saa"] = "robust"

    def to_config(self, experiment: str) -> ExperimentConfig:
        return EstimateRequest.model_validate(self.model_dump(exclude={"method"})).to_config(experiment)


def _run(kind: str, cfg: ExperimentConfig, record: bool, fn) -> Dict[str, Any]:
    if not record:
        return fn()
    with recorded_run(kind, cfg.env, cfg.record(), source="api") as slot:
        result = fn()
        slot["result"] = result
    return {**result, "run_id": slot["run_id"]}


# Environments
@router.get("/envs")
def list_envs():
    return [describe_env(env) for env in sorted(ENVIRONMENTS)]


@router.get("/envs/{env_id}")
def get_env(env_id: str, gamma: Optional[float] = None):
    if env_id not in ENVIRONMENTS:
        raise HTTPException(status_code=404, detail=f"Unknown environment: {env_id}")
    return describe_env(env_id, gamma or settings.DEFAULT_GAMMA, detail=True)


# Estimates
@router.post("/estimate/ope")
def estimate_ope(req: EstimateRequest):
    cfg = req.to_config("ope")
    logger.info(f"[API] ope on {cfg.env} J={cfg.episodes[0]} T={cfg.horizons[0]}")
    return _run("ope", cfg, req.record, lambda: ope_run(cfg))


@router.post("/estimate/adversarial")
def estimate_adversarial(req: EstimateRequest):
    cfg = req.to_config("adversarial")
    logger.info(f"[API] adversarial on {cfg.env} J={cfg.episodes[0]} T={cfg.horizons[0]}")
    return _run("adversarial", cfg, req.record, lambda: adversarial_run(cfg))


@router.post("/estimate/batch")
def estimate_batch(req: BatchRequest):
    cfg = req.to_config("batch-opt")
    logger.info(f"[API] batch-opt ({req.method}) on {cfg.env}")
    return _run("batch-opt", cfg, req.record, lambda: batch_run(cfg, req.method))
