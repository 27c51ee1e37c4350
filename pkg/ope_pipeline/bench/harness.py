# ope_pipeline/bench/harness.py
"""
Experiment harnesses: confidence-interval sweeps, coverage, adversarial
estimation under a shifted logging environment and robust-vs-SAA batch
policy comparison. Trials run through joblib with BLAS pinned to one thread
per worker; every trial derives its own dataset seed from
(base seed, cell index, trial) so tables are reproducible for any n_jobs.
"""

import logging
import sys
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits
from tqdm import tqdm

from ope_pipeline.bench.config import ExperimentConfig
from ope_pipeline.bench.results import ResultTable
from ope_pipeline.bench.tuning import tune_adversarial_radius
from ope_pipeline.data_module.empirical import EmpiricalConditional, build_empirical, plug_in_value
from ope_pipeline.data_module.trajectory import Dataset, simulate
from ope_pipeline.errors import EstimatorError, OpeError
from ope_pipeline.estimation.adversarial_eval import adversarial_estimate, adversarial_evaluation
from ope_pipeline.estimation.batch_rl import (
    batch_radius,
    relative_gap,
    robust_policy_optimization,
    saa_policy_optimization,
)
from ope_pipeline.estimation.robust_eval import (
    ConfidenceInterval,
    RadiusSchedule,
    confidence_interval,
    correction_term,
    default_value_bound,
    optimistic_value_iteration,
    radius_for_ci,
    robust_value_iteration,
)
from ope_pipeline.mdp_model.environments import make_env, perturbed_variant, policy_pair
from ope_pipeline.mdp_model.mdp_core import (
    FiniteMdp,
    Policy,
    exact_policy_value,
    importance_ratios,
    reward_under_policy,
)
from ope_pipeline.wdro_module.cost_metric import CostMetric

logger = logging.getLogger(__name__)


def derive_seed(base_seed: int, cell: int, trial: int) -> int:
    return int(np.random.SeedSequence([base_seed, cell, trial]).generate_state(1)[0])


# -------------------------------------------------------------------
# Single-dataset off-policy evaluation
# -------------------------------------------------------------------
@dataclass
class OpeReport:
    L: float
    U: float
    plug_in: Optional[float]
    correction: float
    ci: ConfidenceInterval
    schedule: RadiusSchedule
    lower: Any
    upper: Any
    contraction: Dict[str, Any]

    def to_record(self) -> Dict[str, Any]:
        return {
            "L": self.L,
            "U": self.U,
            "plug_in": self.plug_in,
            "correction": self.correction,
            "ci": self.ci.to_record(),
            "schedule": self.schedule.to_record(),
            "lower": self.lower.to_record(),
            "upper": self.upper.to_record(),
            "contraction": self.contraction,
            "flags": {"correction_kernel": "plug-in P_mu_hat substituted for the true kernel"},
        }


def evaluate_dataset(
    mdp: FiniteMdp,
    target: Policy,
    behavior: Policy,
    ds: Dataset,
    cfg: ExperimentConfig,
    emp: Optional[EmpiricalConditional] = None,
) -> OpeReport:
    """L, U, plug-in value, correction and interval for one logged dataset."""
    emp = emp or build_empirical(ds, mdp.n_states, mdp.n_actions, cfg.missing_state)
    beta = importance_ratios(target, behavior)
    cost = cfg.cost_metric(mdp.n_states, mdp.n_actions)
    M = default_value_bound(mdp.rewards, mdp.discount)

    fixed = cfg.fixed_radii(mdp.n_states)
    schedule = RadiusSchedule.fixed(fixed, cost.diam) if fixed is not None else radius_for_ci(
        emp, cfg.alpha, M, cost.diam
    )
    if cfg.radius_scale != 1.0:
        schedule = schedule.scaled(cfg.radius_scale)

    common = dict(cost=cost, M=M, clip_to_bound=cfg.clip_values)
    lower = robust_value_iteration(target, beta, mdp.rewards, emp, schedule, mdp.discount, mdp.initial_dist, **common)
    upper = optimistic_value_iteration(target, beta, mdp.rewards, emp, schedule, mdp.discount, mdp.initial_dist,
                                       **common)
    try:
        plug = plug_in_value(emp, beta, reward_under_policy(mdp.rewards, target), mdp.initial_dist, mdp.discount)
    except EstimatorError as e:
        logger.warning(f"[BENCH] plug-in value unavailable: {e}")
        plug = None
    correction = correction_term(emp, beta, mdp.discount, mdp.initial_dist)
    ci = confidence_interval(lower.bound, upper.bound, correction, cfg.alpha, cfg.corrected)
    return OpeReport(lower.bound, upper.bound, plug, correction, ci, schedule, lower, upper, lower.diagnostics)


# -------------------------------------------------------------------
# Parallel execution
# -------------------------------------------------------------------
def _guarded(fn: Callable[..., Dict[str, Any]], *args) -> Tuple[Optional[Dict[str, Any]], Optional[OpeError]]:
    with threadpool_limits(limits=1):
        try:
            return fn(*args), None
        except OpeError as e:
            return None, e


def _run_tasks(fn: Callable[..., Dict[str, Any]], tasks: List[tuple], n_jobs: int, label: str, progress: bool):
    iterator = tqdm(tasks, desc=label, disable=not (progress and sys.stderr.isatty()))
    if n_jobs == 1:
        return [_guarded(fn, *t) for t in iterator]
    return Parallel(n_jobs=n_jobs)(delayed(_guarded)(fn, *t) for t in iterator)


def _grid(cfg: ExperimentConfig) -> List[Tuple[int, int, int]]:
    cells = []
    for J in cfg.episodes:
        for T in cfg.horizons:
            cells.append((len(cells), J, T))
    return cells


def _setup(cfg: ExperimentConfig):
    mdp = make_env(cfg.env, cfg.gamma)
    target, behavior, j_star = policy_pair(mdp, cfg.behavior_spec, cfg.epsilon)
    return mdp, target, behavior, j_star


# -------------------------------------------------------------------
# Confidence-interval sweep and coverage
# -------------------------------------------------------------------
CI_COLUMNS = ("seed", "L", "U", "R_true", "L_norm", "U_norm", "lower", "upper", "width", "covered", "plug_in")


def _ci_trial(cfg: ExperimentConfig, J: int, T: int, seed: int) -> Dict[str, Any]:
    mdp, target, behavior, _ = _setup(cfg)
    ds = simulate(mdp, behavior, J, T, seed, env=cfg.env)
    rep = evaluate_dataset(mdp, target, behavior, ds, cfg)
    r_true = exact_policy_value(mdp, target)
    return {
        "seed": seed,
        "L": rep.L,
        "U": rep.U,
        "R_true": r_true,
        "L_norm": rep.L / r_true,
        "U_norm": rep.U / r_true,
        "lower": rep.ci.lower,
        "upper": rep.ci.upper,
        "width": rep.ci.width,
        "covered": rep.ci.covers(r_true),
        "plug_in": rep.plug_in,
    }


def run_ci_sweep(cfg: ExperimentConfig, progress: bool = True) -> ResultTable:
    table = ResultTable("ci-sweep", ("J", "T", "trial"), CI_COLUMNS, meta={"config": cfg.record()})
    tasks, keys = [], []
    for cell, J, T in _grid(cfg):
        for trial in range(cfg.trials):
            tasks.append((cfg, J, T, derive_seed(cfg.seed, cell, trial)))
            keys.append({"J": J, "T": T, "trial": trial})
    for key, (row, err) in zip(keys, _run_tasks(_ci_trial, tasks, cfg.n_jobs, "ci-sweep", progress)):
        if err is not None:
            table.add_failure(key, err)
        else:
            table.add(key, row)
    return table


COVERAGE_COLUMNS = ("trials", "n_ok", "n_failed", "n_covered", "coverage", "miss_rate", "mean_width")


def run_coverage(cfg: ExperimentConfig, progress: bool = True) -> ResultTable:
    table = ResultTable("coverage", ("J", "T"), COVERAGE_COLUMNS, meta={"config": cfg.record()})
    cells = _grid(cfg)
    tasks, owners = [], []
    for cell, J, T in cells:
        for trial in range(cfg.trials):
            tasks.append((cfg, J, T, derive_seed(cfg.seed, cell, trial)))
            owners.append(cell)
    outcomes = _run_tasks(_ci_trial, tasks, cfg.n_jobs, "coverage", progress)
    for cell, J, T in cells:
        mine = [o for o, c in zip(outcomes, owners) if c == cell]
        ok = [row for row, err in mine if err is None]
        errors = [err for _, err in mine if err is not None]
        key = {"J": J, "T": T}
        if not ok:
            table.add_failure(key, errors[0])
            continue
        covered = sum(bool(r["covered"]) for r in ok)
        table.add(key, {
            "trials": cfg.trials,
            "n_ok": len(ok),
            "n_failed": len(errors),
            "n_covered": covered,
            "coverage": covered / len(ok),
            "miss_rate": 1.0 - covered / len(ok),
            "mean_width": float(np.mean([r["width"] for r in ok])),
        })
    return table


# -------------------------------------------------------------------
# Adversarial estimation under environment shift
# -------------------------------------------------------------------
ADV_COLUMNS = ("seed", "episodes", "length", "value", "L_adv", "ratio", "abs_error", "std_error", "lower", "upper",
               "covers_adv", "R_future")


@dataclass(frozen=True)
class AdversarialReference:
    target: Policy
    behavior: Policy
    logging_env: FiniteMdp
    future_env: FiniteMdp
    rho: np.ndarray
    L_adv: float
    R_future: float


def adversarial_reference(cfg: ExperimentConfig, rho: Optional[np.ndarray] = None) -> AdversarialReference:
    """Population L_adv(rho) of the logging (perturbed) environment at the fixed or tuned radii."""
    future = make_env(cfg.env, cfg.gamma)
    logging_env = perturbed_variant(cfg.env, cfg.gamma)
    target, behavior, _ = policy_pair(future, cfg.behavior_spec, cfg.epsilon)
    if rho is None:
        rho = cfg.fixed_radii(future.n_states)
    if rho is None:
        rho = tune_adversarial_radius(future, logging_env, cfg).rho
    pop = EmpiricalConditional.from_population(logging_env, behavior)
    beta = importance_ratios(target, behavior)
    est = adversarial_estimate(pop, beta, target, future.rewards, future.initial_dist, cfg.gamma, rho,
                               cost=cfg.cost_metric(future.n_states, future.n_actions))
    return AdversarialReference(target, behavior, logging_env, future, np.asarray(rho, dtype=float), est.bound,
                                exact_policy_value(future, target))


def episode_split(cfg: ExperimentConfig, J: int, T: int) -> Tuple[int, int]:
    """
    (episodes, length) simulated for a J x T cell. With cfg.episode_length set
    and shorter than T, the J*T transition budget is spread over episodes of
    that length (rounded down to whole episodes).
    """
    length = cfg.episode_length
    if length is None or T <= length:
        return J, T
    return max(1, J * T // length), length


def _adv_trial(cfg: ExperimentConfig, ref: AdversarialReference, J: int, T: int, seed: int) -> Dict[str, Any]:
    n_episodes, length = episode_split(cfg, J, T)
    ds = simulate(ref.logging_env, ref.behavior, n_episodes, length, seed, env=f"{cfg.env}-perturbed")
    emp = build_empirical(ds, ref.future_env.n_states, ref.future_env.n_actions, cfg.missing_state)
    beta = importance_ratios(ref.target, ref.behavior)
    res = adversarial_evaluation(emp, beta, ref.target, ref.future_env.rewards, ref.future_env.initial_dist,
                                 cfg.gamma, ref.rho, alpha=cfg.alpha,
                                 cost=cfg.cost_metric(ref.future_env.n_states, ref.future_env.n_actions))
    return {
        "seed": seed,
        "episodes": n_episodes,
        "length": length,
        "value": res.value,
        "L_adv": ref.L_adv,
        "ratio": res.value / ref.L_adv,
        "abs_error": abs(res.value - ref.L_adv),
        "std_error": res.std_error,
        "lower": res.ci.lower,
        "upper": res.ci.upper,
        "covers_adv": res.ci.covers(ref.L_adv),
        "R_future": ref.R_future,
    }


def run_adversarial(cfg: ExperimentConfig, progress: bool = True) -> ResultTable:
    ref = adversarial_reference(cfg)
    meta = {"config": cfg.record(), "rho": ref.rho.tolist(), "L_adv": ref.L_adv, "R_future": ref.R_future}
    table = ResultTable("adversarial", ("J", "T", "trial"), ADV_COLUMNS, meta=meta)
    tasks, keys = [], []
    for cell, J, T in _grid(cfg):
        for trial in range(cfg.trials):
            tasks.append((cfg, ref, J, T, derive_seed(cfg.seed, cell, trial)))
            keys.append({"J": J, "T": T, "trial": trial})
    for key, (row, err) in zip(keys, _run_tasks(_adv_trial, tasks, cfg.n_jobs, "adversarial", progress)):
        if err is not None:
            table.add_failure(key, err)
        else:
            table.add(key, row)
    return table


# -------------------------------------------------------------------
# Robust vs SAA batch policy optimisation
# -------------------------------------------------------------------
BATCH_COLUMNS = ("seed", "value", "J_policy", "J_star", "gap", "correction", "bound_holds", "actions")
ARMS = ("robust", "saa")


def batch_schedule(cfg: ExperimentConfig, mdp: FiniteMdp, emp: EmpiricalConditional, cost: CostMetric) -> RadiusSchedule:
    """Fixed radii from the config, else the batch schedule; then the configured scale."""
    fixed = cfg.fixed_radii(mdp.n_states)
    if fixed is not None:
        schedule = RadiusSchedule.fixed(fixed, cost.diam)
    else:
        M = default_value_bound(mdp.rewards, mdp.discount)
        schedule = batch_radius(emp, cfg.alpha, M, cost.diam, mdp.n_actions)
    return schedule.scaled(cfg.radius_scale) if cfg.radius_scale != 1.0 else schedule


def _batch_trial(cfg: ExperimentConfig, arm: str, J: int, T: int, seed: int) -> Dict[str, Any]:
    mdp, _, behavior, j_star = _setup(cfg)
    ds = simulate(mdp, behavior, J, T, seed, env=cfg.env)
    emp = build_empirical(ds, mdp.n_states, mdp.n_actions, cfg.missing_state)
    if arm == "robust":
        cost = cfg.cost_metric(mdp.n_states, mdp.n_actions)
        schedule = batch_schedule(cfg, mdp, emp, cost)
        res = robust_policy_optimization(behavior, mdp.rewards, emp, schedule, mdp.discount, mdp.initial_dist,
                                         cost=cost)
    else:
        res = saa_policy_optimization(behavior, mdp.rewards, emp, mdp.discount, mdp.initial_dist)

    j_pol = exact_policy_value(mdp, res.policy)
    try:
        correction = correction_term(emp, importance_ratios(res.policy, behavior), mdp.discount, mdp.initial_dist)
    except OpeError as e:
        logger.warning(f"[BENCH] correction unavailable for the {arm} policy: {e}")
        correction = None
    return {
        "seed": seed,
        "value": res.L_star,
        "J_policy": j_pol,
        "J_star": j_star,
        "gap": relative_gap(mdp, res.policy, j_star),
        "correction": correction,
        "bound_holds": None if correction is None else j_pol >= res.L_star - correction,
        "actions": " ".join(str(a) for a in res.policy.greedy_actions()),
    }


def run_batch_compare(cfg: ExperimentConfig, progress: bool = True) -> ResultTable:
    table = ResultTable("batch-compare", ("J", "T", "trial", "arm"), BATCH_COLUMNS, meta={"config": cfg.record()})
    tasks, keys = [], []
    for cell, J, T in _grid(cfg):
        for trial in range(cfg.trials):
            seed = derive_seed(cfg.seed, cell, trial)
            for arm in ARMS:
                tasks.append((cfg, arm, J, T, seed))
                keys.append({"J": J, "T": T, "trial": trial, "arm": arm})
    for key, (row, err) in zip(keys, _run_tasks(_batch_trial, tasks, cfg.n_jobs, "batch-compare", progress)):
        if err is not None:
            table.add_failure(key, err)
        else:
            table.add(key, row)
    return table


EXPERIMENTS = {
    "ci-sweep": run_ci_sweep,
    "coverage": run_coverage,
    "adversarial": run_adversarial,
    "batch-compare": run_batch_compare,
}
