# ope_pipeline/bench/runs.py
"""
Single-dataset runs shared by the CLI and the HTTP API. Each returns a
JSON-ready record; sweeps over many datasets live in bench.harness.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

from ope_pipeline import __version__
from ope_pipeline.bench.config import ExperimentConfig
from ope_pipeline.bench.harness import (
    EXPERIMENTS,
    adversarial_reference,
    batch_schedule,
    episode_split,
    evaluate_dataset,
)
from ope_pipeline.bench.results import ResultTable
from ope_pipeline.bench.tuning import TunedRadius, tune_adversarial_radius
from ope_pipeline.data_module.empirical import build_empirical
from ope_pipeline.data_module.trajectory import Dataset, load_dataset, rollout_value, save_dataset, simulate
from ope_pipeline.errors import InputError
from ope_pipeline.estimation.adversarial_eval import adversarial_evaluation, radii_record
from ope_pipeline.estimation.batch_rl import (
    relative_gap,
    robust_policy_optimization,
    saa_policy_optimization,
    worst_case_for_policy,
)
from ope_pipeline.mdp_model.environments import CONVENTION_FLAGS, make_env, perturbed_variant, policy_pair
from ope_pipeline.mdp_model.mdp_core import FiniteMdp, Policy, exact_policy_value, importance_ratios

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
BatchMethod = Literal["robust", "saa"]


def _envelope(cfg: ExperimentConfig, body: Dict[str, Any]) -> Dict[str, Any]:
    return {"version": __version__, "config": cfg.record(), "conventions": CONVENTION_FLAGS, **body}


def _dataset(
    cfg: ExperimentConfig, mdp: FiniteMdp, behavior: Policy, data: Optional[PathLike], env_label: str
) -> Dataset:
    if data is None:
        return simulate(mdp, behavior, cfg.episodes[0], cfg.horizons[0], cfg.seed, env=env_label)
    ds = load_dataset(data)
    if (ds.meta.n_states, ds.meta.n_actions) != (mdp.n_states, mdp.n_actions):
        raise InputError(
            f"dataset {data} has {ds.meta.n_states} states and {ds.meta.n_actions} actions, "
            f"environment '{cfg.env}' has {mdp.n_states} and {mdp.n_actions}"
        )
    logger.info(f"[BENCH] loaded {ds.n_transitions} transitions from {data}")
    return ds


def generate_dataset(cfg: ExperimentConfig, out: PathLike) -> Dict[str, Any]:
    """Simulate the behavior policy on the (optionally perturbed) environment and save it."""
    mdp = perturbed_variant(cfg.env, cfg.gamma) if cfg.perturbed else make_env(cfg.env, cfg.gamma)
    _, behavior, _ = policy_pair(make_env(cfg.env, cfg.gamma), cfg.behavior_spec, cfg.epsilon)
    label = f"{cfg.env}-perturbed" if cfg.perturbed else cfg.env
    ds = simulate(mdp, behavior, cfg.episodes[0], cfg.horizons[0], cfg.seed, env=label)
    save_dataset(ds, out)
    return _envelope(cfg, {"path": str(out), "transitions": ds.n_transitions, "env": label})


def ope_run(cfg: ExperimentConfig, data: Optional[PathLike] = None) -> Dict[str, Any]:
    mdp = make_env(cfg.env, cfg.gamma)
    target, behavior, j_star = policy_pair(mdp, cfg.behavior_spec, cfg.epsilon)
    ds = _dataset(cfg, mdp, behavior, data, cfg.env)
    report = evaluate_dataset(mdp, target, behavior, ds, cfg)
    body = {"estimate": report.to_record(), "R_true": j_star, "covered": report.ci.covers(j_star)}
    if cfg.rollouts > 0:
        mean, stderr = rollout_value(mdp, target, cfg.rollouts, cfg.horizons[0], cfg.seed)
        body["rollout"] = {"mean": mean, "stderr": stderr, "episodes": cfg.rollouts}
    return _envelope(cfg, body)


def tune_run(cfg: ExperimentConfig) -> TunedRadius:
    return tune_adversarial_radius(make_env(cfg.env, cfg.gamma), perturbed_variant(cfg.env, cfg.gamma), cfg)


def adversarial_run(cfg: ExperimentConfig, data: Optional[PathLike] = None) -> Dict[str, Any]:
    """Adversarial estimate from perturbed-environment data at fixed (or tuned) radii."""
    ref = adversarial_reference(cfg)
    label = f"{cfg.env}-perturbed"
    if data is None:
        n_episodes, length = episode_split(cfg, cfg.episodes[0], cfg.horizons[0])
        ds = simulate(ref.logging_env, ref.behavior, n_episodes, length, cfg.seed, env=label)
    else:
        ds = _dataset(cfg, ref.logging_env, ref.behavior, data, label)
    emp = build_empirical(ds, ref.future_env.n_states, ref.future_env.n_actions, cfg.missing_state)
    beta = importance_ratios(ref.target, ref.behavior)
    res = adversarial_evaluation(emp, beta, ref.target, ref.future_env.rewards, ref.future_env.initial_dist,
                                 cfg.gamma, ref.rho, alpha=cfg.alpha,
                                 cost=cfg.cost_metric(ref.future_env.n_states, ref.future_env.n_actions))
    body = {
        "episodes": ds.meta.J,
        "length": ds.meta.T,
        "estimate": res.to_record(),
        "radii": radii_record(ref.rho),
        "L_adv_reference": ref.L_adv,
        "R_future": ref.R_future,
        "covers_reference": res.ci.covers(ref.L_adv),
    }
    return _envelope(cfg, body)


def batch_run(cfg: ExperimentConfig, method: BatchMethod = "robust", data: Optional[PathLike] = None) -> Dict[str, Any]:
    mdp = make_env(cfg.env, cfg.gamma)
    _, behavior, j_star = policy_pair(mdp, cfg.behavior_spec, cfg.epsilon)
    ds = _dataset(cfg, mdp, behavior, data, cfg.env)
    emp = build_empirical(ds, mdp.n_states, mdp.n_actions, cfg.missing_state)
    if method == "robust":
        cost = cfg.cost_metric(mdp.n_states, mdp.n_actions)
        schedule = batch_schedule(cfg, mdp, emp, cost)
        res = robust_policy_optimization(behavior, mdp.rewards, emp, schedule, mdp.discount, mdp.initial_dist,
                                         cost=cost)
        worst = worst_case_for_policy(res, behavior, emp, cost)
    elif method == "saa":
        res = saa_policy_optimization(behavior, mdp.rewards, emp, mdp.discount, mdp.initial_dist)
        worst = None
    else:
        raise InputError(f"unknown batch method '{method}' (expected 'robust' or 'saa')")
    body = {
        "method": method,
        "result": res.to_record(),
        "J_policy": exact_policy_value(mdp, res.policy),
        "J_star": j_star,
        "gap": relative_gap(mdp, res.policy, j_star),
    }
    if worst is not None:
        body["worst_case"] = [
            None if mu is None else {"points": mu.points.tolist(), "weights": mu.weights.tolist()} for mu in worst
        ]
    return _envelope(cfg, body)


def sweep_run(cfg: ExperimentConfig, progress: bool = True) -> Tuple[ResultTable, Dict[str, Any]]:
    """Run the harness named by cfg.experiment; returns the table and a short summary."""
    try:
        runner = EXPERIMENTS[cfg.experiment]
    except KeyError:
        raise InputError(f"'{cfg.experiment}' is not a sweep experiment ({sorted(EXPERIMENTS)})") from None
    table = runner(cfg, progress)
    failed = sum(r["status"] != "ok" for r in table.rows)
    return table, {"experiment": cfg.experiment, "rows": len(table.rows), "failed": failed}
