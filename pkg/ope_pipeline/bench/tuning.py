# ope_pipeline/bench/tuning.py
"""
Radius tuning for adversarial estimation.

Radii are uniform across states. The target is R_pi of the future environment
lowered by a relative margin, so the tuned radius is positive even when the
logging environment's plug-in value already sits at R_pi. L_adv(rho) is
computed from the exact conditionals of the logging environment and is
nonincreasing in rho: bisection over the grid
rho_k = multiplier_max * diam * k / grid_size finds the first grid point under
the target, and a continuous bisection inside the last grid cell sharpens it.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from ope_pipeline import settings
from ope_pipeline.bench.config import ExperimentConfig
from ope_pipeline.data_module.empirical import EmpiricalConditional
from ope_pipeline.errors import EstimatorError, InputError
from ope_pipeline.estimation.adversarial_eval import adversarial_estimate
from ope_pipeline.mdp_model.environments import policy_pair
from ope_pipeline.mdp_model.mdp_core import FiniteMdp, exact_policy_value, importance_ratios

logger = logging.getLogger(__name__)

GRID_SIZE = 200
MULTIPLIER_MAX = 1.0
REFINE_STEPS = 30
TUNE_ATOL = 1e-8


@dataclass
class TunedRadius:
    rho: np.ndarray
    multiplier: float
    L_adv: float
    R_future: float
    goal: float
    evaluations: List[Tuple[float, float]] = field(default_factory=list)

    def to_record(self) -> Dict[str, Any]:
        return {
            "rho": self.rho.tolist(),
            "multiplier": self.multiplier,
            "L_adv": self.L_adv,
            "R_future": self.R_future,
            "goal": self.goal,
            "evaluations": [{"rho": r, "L_adv": v} for r, v in self.evaluations],
        }


def tune_adversarial_radius(
    env: FiniteMdp,
    perturbed_env: FiniteMdp,
    cfg: ExperimentConfig,
    grid_size: int = GRID_SIZE,
    multiplier_max: float = MULTIPLIER_MAX,
    margin: float = settings.TUNE_MARGIN,
    refine_steps: int = REFINE_STEPS,
) -> TunedRadius:
    """Smallest radius with L_adv(rho) <= (1 - margin) R_pi of `env`, data drawn from `perturbed_env`."""
    if (env.n_states, env.n_actions) != (perturbed_env.n_states, perturbed_env.n_actions):
        raise InputError("environment and its perturbed variant must share state and action spaces")
    if grid_size < 1 or multiplier_max <= 0:
        raise InputError("tuning grid needs grid_size >= 1 and a positive multiplier range")
    if not 0.0 <= margin < 1.0 or refine_steps < 0:
        raise InputError("tuning margin must lie in [0, 1) and refine_steps must be nonnegative")

    target, behavior, _ = policy_pair(env, cfg.behavior_spec, cfg.epsilon)
    beta = importance_ratios(target, behavior)
    pop = EmpiricalConditional.from_population(perturbed_env, behavior)
    cost = cfg.cost_metric(env.n_states, env.n_actions)
    r_future = exact_policy_value(env, target)
    goal = r_future - margin * abs(r_future)
    step = multiplier_max * cost.diam / grid_size

    evaluations: Dict[float, float] = {}

    def l_adv(rho: float) -> float:
        if rho not in evaluations:
            est = adversarial_estimate(pop, beta, target, env.rewards, env.initial_dist, env.discount,
                                       np.full(env.n_states, rho), cost=cost)
            evaluations[rho] = est.bound
            logger.debug(f"[BENCH] tune rho={rho:.6g} L_adv={est.bound:.8f}")
        return evaluations[rho]

    def achieved(rho: float) -> bool:
        return l_adv(rho) <= goal + TUNE_ATOL

    if not achieved(grid_size * step):
        raise EstimatorError(
            f"L_adv stays above the goal {goal:.6f} (R_pi={r_future:.6f}) up to rho={grid_size * step:.6g} "
            f"(L_adv={evaluations[grid_size * step]:.6f}); widen the multiplier range"
        )
    lo, hi = 0, grid_size
    if achieved(0.0):
        hi = 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if achieved(mid * step):
            hi = mid
        else:
            lo = mid

    rho_lo, rho_hi = lo * step, hi * step
    if hi > 0:
        for _ in range(refine_steps):
            mid = 0.5 * (rho_lo + rho_hi)
            if achieved(mid):
                rho_hi = mid
            else:
                rho_lo = mid

    logger.info(f"[BENCH] tuned rho={rho_hi:.6g} (grid k={hi}/{grid_size}), L_adv={evaluations[rho_hi]:.6f} "
                f"<= {goal:.6f} = (1 - {margin}) R_pi")
    return TunedRadius(np.full(env.n_states, rho_hi), rho_hi / cost.diam, evaluations[rho_hi], r_future, goal,
                       sorted(evaluations.items()))
