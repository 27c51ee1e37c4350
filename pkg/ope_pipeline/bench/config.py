# ope_pipeline/bench/config.py
"""
Experiment configuration shared by the CLI, the harnesses and the API.
Defaults come from ope_pipeline.settings; a JSON or YAML file may override
any field.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ope_pipeline import settings
from ope_pipeline.errors import InputError
from ope_pipeline.estimation.adversarial_eval import load_fixed_radii
from ope_pipeline.mdp_model.environments import default_behavior_spec
from ope_pipeline.wdro_module.cost_metric import CostMetric, load_cost

logger = logging.getLogger(__name__)

Experiment = Literal["ope", "ci-sweep", "coverage", "adversarial", "batch-opt", "batch-compare", "tune-rho", "gen-data"]
INTERVAL_SWEEPS = ("ci-sweep", "coverage")
BATCH_EXPERIMENTS = ("batch-opt", "batch-compare")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: Experiment = "ope"
    env: Literal["mrp", "hmp"] = "mrp"
    behavior: Optional[str] = None
    epsilon: float = Field(settings.DEFAULT_BEHAVIOR_EPSILON, ge=0.0, le=1.0)
    target: Literal["optimal"] = "optimal"
    gamma: float = Field(settings.DEFAULT_GAMMA, gt=0.0, lt=1.0)
    alpha: float = Field(settings.DEFAULT_ALPHA, gt=0.0, lt=1.0)
    episodes: List[int] = Field(default_factory=lambda: [settings.DEFAULT_EPISODES])
    horizons: List[int] = Field(default_factory=lambda: [settings.DEFAULT_HORIZON])
    trials: int = Field(1, ge=1)
    seed: int = 7
    radii_mode: Literal["schedule", "fixed"] = "schedule"
    radii_file: Optional[Path] = None
    radii: Optional[Dict[str, float]] = None
    radius: Optional[float] = Field(None, ge=0.0)
    radius_scale: Optional[float] = Field(None, ge=0.0)
    cost_file: Optional[Path] = None
    corrected: bool = True
    clip_values: Optional[bool] = None
    episode_length: Optional[int] = Field(None, ge=1)
    perturbed: bool = False
    missing_state: Literal["error", "bound"] = "error"
    rollouts: int = Field(0, ge=0)
    n_jobs: int = settings.N_JOBS
    out: Optional[Path] = None

    @field_validator("episodes", "horizons")
    @classmethod
    def _positive_grid(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("grid must be nonempty")
        if any(x < 1 for x in value):
            raise ValueError("grid entries must be at least 1")
        return value

    @model_validator(mode="after")
    def _resolve_presets(self) -> "ExperimentConfig":
        given = self.radii is not None or self.radii_file is not None or self.radius is not None
        if self.radii_mode == "fixed" and not given:
            raise ValueError("radii_mode 'fixed' needs radii, radii_file or radius")
        if given:
            self.radii_mode = "fixed"
        interval_sweep = self.experiment in INTERVAL_SWEEPS
        if self.radius_scale is None:
            if self.radii_mode == "fixed":
                self.radius_scale = 1.0
            elif interval_sweep:
                self.radius_scale = settings.CI_RADIUS_SCALE
            elif self.experiment in BATCH_EXPERIMENTS:
                self.radius_scale = settings.BATCH_RADIUS_SCALE
            else:
                self.radius_scale = 1.0
        if self.clip_values is None:
            self.clip_values = interval_sweep
        if self.episode_length is None and self.experiment == "adversarial":
            self.episode_length = settings.ADV_EPISODE_LENGTH
        return self

    @property
    def behavior_spec(self) -> str:
        return self.behavior or default_behavior_spec(self.env)

    def fixed_radii(self, n_states: int) -> Optional[np.ndarray]:
        """Radii from an inline map, --radii-file or a uniform --radius, in that order."""
        if self.radii is not None:
            return load_fixed_radii(self.radii, n_states)
        if self.radii_file is not None:
            return load_fixed_radii(read_mapping(self.radii_file), n_states)
        if self.radius is not None:
            return np.full(n_states, self.radius)
        return None

    def cost_metric(self, n_states: int, n_actions: int) -> CostMetric:
        if self.cost_file is None:
            return CostMetric.normalized(n_states, n_actions)
        cost = load_cost(self.cost_file)
        if (cost.n_states, cost.n_actions) != (n_states, n_actions):
            raise InputError(
                f"cost table {self.cost_file} is {cost.n_states}x{cost.n_actions}, "
                f"environment is {n_states}x{n_actions}"
            )
        return cost

    def record(self) -> Dict[str, Any]:
        return json.loads(self.model_dump_json())


def read_mapping(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    try:
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise InputError(f"cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise InputError(f"{path} must contain a mapping at the top level")
    return data


def build_config(flags: Dict[str, Any], config_path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Flags (None means unset) overlaid by the optional config file."""
    values = {k: v for k, v in flags.items() if v is not None}
    if config_path is not None:
        values.update(read_mapping(config_path))
        logger.info(f"[BENCH] loaded config overrides from {config_path}")
    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise InputError(f"invalid configuration at '{where}': {first['msg']}") from e
