# ope_pipeline/estimation/batch_rl.py
"""
Distributionally robust batch policy optimisation from logged data.

The fixed point solved is
    v(s) = max_{a'} r(s, a') + gamma * min_{mu in ball_s} E_mu[v(s') 1{a = a'} / pi_b(a'|s)],
i.e. per-state maximisation over deterministic actions of per-action robust
inner minima. Deterministic choices suffice because the objective is linear
in pi(.|s). Off-choice atoms carry f = 0, so the adversary may move mass onto
them.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from ope_pipeline import settings
from ope_pipeline.data_module.empirical import EmpiricalConditional
from ope_pipeline.errors import InputError, NonConvergenceError
from ope_pipeline.estimation.robust_eval import (
    RadiusSchedule,
    check_alpha,
    default_eps,
    default_value_bound,
    radius_schedule,
)
from ope_pipeline.mdp_model.mdp_core import FiniteMdp, Policy, argmax_lowest, exact_policy_value, optimal_policy
from ope_pipeline.wdro_module.cost_metric import CostMetric
from ope_pipeline.wdro_module.solver import WeightedAtoms, lipschitz_norm, solve_robust_dual, worst_case_distribution

logger = logging.getLogger(__name__)


@dataclass
class BatchResult:
    policy: Policy
    v_star: np.ndarray
    L_star: float
    iterations: int
    sup_norm_residual: float
    q: np.ndarray
    rho: np.ndarray
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        return {
            "policy": self.policy.greedy_actions().tolist(),
            "v_star": self.v_star.tolist(),
            "L_star": self.L_star,
            "iterations": self.iterations,
            "sup_norm_residual": self.sup_norm_residual,
            "rho": self.rho.tolist(),
            "diagnostics": self.diagnostics,
        }


def batch_radius(emp: EmpiricalConditional, alpha: float, M: float, diam: float, n_actions: int) -> RadiusSchedule:
    """tau = log(|S| / alpha), tau_s = tau + log(2 |A| n_s M)."""
    check_alpha(alpha)
    if M <= 0:
        raise InputError("value bound M must be positive")
    tau = float(np.log(emp.n_states / alpha))
    with np.errstate(divide="ignore"):
        offsets = np.log(2.0 * n_actions * emp.n * M)
    return radius_schedule(emp, tau, offsets, diam, "nonasymptotic", alpha, M)


class BatchBellmanOperator:
    """phi(v)(s) = max over allowed actions of the per-action robust backups."""

    def __init__(
        self,
        behavior: Policy,
        rewards: np.ndarray,
        emp: EmpiricalConditional,
        rho: np.ndarray,
        gamma: float,
        cost: CostMetric,
    ):
        S, A = emp.n_states, emp.n_actions
        if behavior.probs.shape != (S, A) or np.shape(rewards) != (S, A) or np.shape(rho) != (S,):
            raise InputError("dimensions of behavior, rewards, radii and conditionals disagree")
        if emp.missing_state == "error":
            emp.require_coverage()
        self.rewards = np.asarray(rewards, dtype=float)
        self.gamma = float(gamma)
        self.rho = np.asarray(rho, dtype=float)
        self.covered = emp.covered
        self.allowed = behavior.probs > 0
        with np.errstate(divide="ignore"):
            self.inv_pb = np.where(self.allowed, 1.0 / behavior.probs, 0.0)
        # plug-in kernel per action: mu_hat(a', s'|s) / pi_b(a'|s)
        self.kernel = emp.weights * self.inv_pb[:, :, None]
        self.atoms = []
        for s in range(S):
            points, weights = emp.atoms(s)
            self.atoms.append((points, weights, cost.table[points] if points.size else None))
        self.n_states, self.n_actions = S, A

    def indicator_function(self, s: int, a_choice: int, v: np.ndarray) -> np.ndarray:
        f = np.zeros((self.n_actions, self.n_states))
        f[a_choice] = v * self.inv_pb[s, a_choice]
        return f.ravel()

    def q_values(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        q = self.rewards + self.gamma * np.einsum("sat,t->sa", self.kernel, v)
        for s in np.flatnonzero((self.rho > 0) & self.covered):
            points, weights, C = self.atoms[s]
            for a in np.flatnonzero(self.allowed[s]):
                value, _ = solve_robust_dual(self.indicator_function(s, a, v), C, weights, self.rho[s])
                q[s, a] = self.rewards[s, a] + self.gamma * value
        q[~self.allowed] = -np.inf
        return q

    def __call__(self, v: np.ndarray) -> np.ndarray:
        out = self.q_values(v).max(axis=1)
        out[~self.covered] = 0.0
        return out


def _optimize(
    behavior: Policy,
    rewards: np.ndarray,
    emp: EmpiricalConditional,
    rho: np.ndarray,
    gamma: float,
    d0: np.ndarray,
    tol: float,
    cost: Optional[CostMetric],
    max_sweeps: int,
    label: str,
) -> BatchResult:
    cost = cost or CostMetric.normalized(emp.n_states, emp.n_actions)
    op = BatchBellmanOperator(behavior, rewards, emp, rho, gamma, cost)
    M = default_value_bound(rewards, gamma)
    limit = settings.DIVERGENCE_FACTOR * M
    v = np.zeros(emp.n_states)
    delta = np.inf
    for it in range(1, max_sweeps + 1):
        v_new = op(v)
        if not np.all(np.isfinite(v_new)) or np.max(np.abs(v_new)) > limit:
            raise NonConvergenceError(
                f"{label} policy iteration diverged after {it} sweeps",
                {"sweeps": it, "max_abs_v": float(np.max(np.abs(v_new))), "limit": limit},
            )
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta < tol:
            break
    else:
        raise NonConvergenceError(
            f"{label} policy iteration did not reach tol={tol} in {max_sweeps} sweeps",
            {"sweeps": max_sweeps, "last_delta": delta},
        )
    q = op.q_values(v)
    policy = Policy.from_actions(argmax_lowest(np.where(np.isfinite(q), q, -1e300)), emp.n_actions)
    L_star = float((1.0 - gamma) * np.asarray(d0) @ v)
    logger.info(f"[BATCH] {label}: L*={L_star:.6f} after {it} sweeps, actions={policy.greedy_actions().tolist()}")
    return BatchResult(policy, v, L_star, it, delta, q, np.asarray(rho, dtype=float).copy())


def robust_policy_optimization(
    behavior: Policy,
    rewards: np.ndarray,
    emp: EmpiricalConditional,
    schedule: RadiusSchedule,
    gamma: float,
    d0: np.ndarray,
    tol: float = settings.VI_TOL,
    cost: Optional[CostMetric] = None,
    max_sweeps: int = settings.VI_MAX_SWEEPS,
) -> BatchResult:
    cost = cost or CostMetric.normalized(emp.n_states, emp.n_actions)
    report = batch_contraction_diagnostics(behavior, emp, schedule, gamma, cost=cost)
    if not report.all_passed:
        failing = np.flatnonzero(~report.passed).tolist()
        logger.warning(f"[BATCH] contraction precondition fails at states {failing}")
    result = _optimize(behavior, rewards, emp, schedule.rho, gamma, d0, tol, cost, max_sweeps, "robust")
    result.diagnostics["contraction"] = report.to_record()
    result.diagnostics["schedule"] = schedule.to_record()
    return result


def saa_policy_optimization(
    behavior: Policy,
    rewards: np.ndarray,
    emp: EmpiricalConditional,
    gamma: float,
    d0: np.ndarray,
    tol: float = settings.VI_TOL,
    max_sweeps: int = settings.VI_MAX_SWEEPS,
) -> BatchResult:
    """
    Sample-average plug-in optimisation (all radii zero).

    The result stands whenever value iteration settles under the divergence
    guard. gamma * max mu_hat(a|s)/pi_b(a|s) and the spectral radius of the
    greedy plug-in kernel are reported, not enforced.
    """
    if emp.missing_state == "error":
        emp.require_coverage()
    allowed = behavior.probs > 0
    inv_pb = np.where(allowed, 1.0 / np.where(allowed, behavior.probs, 1.0), 0.0)
    ratio = emp.action_freq() * inv_pb
    worst = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
    row_sum = {"state": int(worst[0]), "action": int(worst[1]), "max_row_sum": float(ratio[worst])}
    rho = np.zeros(emp.n_states)
    try:
        result = _optimize(behavior, rewards, emp, rho, gamma, d0, tol, None, max_sweeps, "saa")
    except NonConvergenceError as e:
        e.diagnostics.update(row_sum)
        logger.warning(f"[BATCH] saa diverged; gamma * mu_hat(a|s)/pi_b(a|s) = {gamma * ratio[worst]:.4f} "
                       f"at (s={worst[0]}, a={worst[1]})")
        raise
    idx, actions = np.arange(emp.n_states), result.policy.greedy_actions()
    greedy = emp.weights[idx, actions] * inv_pb[idx, actions][:, None]
    greedy[~emp.covered] = 0.0
    spectral = gamma * float(np.max(np.abs(np.linalg.eigvals(greedy))))
    if gamma * ratio[worst] >= 1.0:
        logger.info(f"[BATCH] saa converged although the row-sum bound is {gamma * ratio[worst]:.4f}; "
                    f"greedy kernel spectral radius {spectral:.4f}")
    result.diagnostics.update(row_sum)
    result.diagnostics["greedy_spectral_radius"] = spectral
    return result


def relative_gap(mdp_true: FiniteMdp, policy: Policy, j_star: Optional[float] = None) -> float:
    """100 (J* - J(pi)) / |J*| on the true MDP."""
    if j_star is None:
        _, j_star = optimal_policy(mdp_true)
    if j_star == 0:
        raise InputError("relative gap is undefined when J* = 0")
    return 100.0 * (j_star - exact_policy_value(mdp_true, policy)) / abs(j_star)


# -------------------------------------------------------------------
# Diagnostics
# -------------------------------------------------------------------
@dataclass
class BatchContractionReport:
    worst_product: np.ndarray
    margin: np.ndarray
    passed: np.ndarray
    probability: float

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))

    def to_record(self) -> Dict[str, Any]:
        return {
            "worst_product": self.worst_product.tolist(),
            "margin": self.margin.tolist(),
            "passed": self.passed.tolist(),
            "all_passed": self.all_passed,
            "probability": self.probability,
        }


def batch_contraction_diagnostics(
    behavior: Policy,
    emp: EmpiricalConditional,
    schedule: RadiusSchedule,
    gamma: float,
    eps=None,
    cost: Optional[CostMetric] = None,
) -> BatchContractionReport:
    """
    Worst rho_s ||beta^{a'}_s||_Lip over deterministic choices a', the margin
    against (1 - gamma)/(2 gamma) - eps_s, and 1 - sum_s exp(-2 n_s delta_s^2 eps_s^2)
    with delta_s the smallest positive behavior probability at s.
    """
    S, A = emp.n_states, emp.n_actions
    cost = cost or CostMetric.normalized(S, A)
    eps = np.full(S, default_eps(gamma)) if eps is None else np.broadcast_to(np.asarray(eps, dtype=float), (S,))
    worst = np.zeros(S)
    for s in np.flatnonzero(emp.covered):
        points, _ = emp.atoms(s)
        for a in np.flatnonzero(behavior.probs[s] > 0):
            f = np.zeros((A, S))
            f[a] = 1.0 / behavior.probs[s, a]
            worst[s] = max(worst[s], schedule.rho[s] * lipschitz_norm(f.ravel(), points, cost))
    margin = (1.0 - gamma) / (2.0 * gamma) - eps - worst
    passed = (margin >= 0) | ~emp.covered
    delta = np.array([row[row > 0].min() for row in behavior.probs])
    tails = np.exp(-2.0 * emp.n * delta ** 2 * eps ** 2)
    return BatchContractionReport(worst, margin, passed, float(1.0 - tails[emp.covered].sum()))


def worst_case_for_policy(
    result: BatchResult,
    behavior: Policy,
    emp: EmpiricalConditional,
    cost: Optional[CostMetric] = None,
) -> List[Optional[WeightedAtoms]]:
    """mu*(.|s) for the chosen action at the converged value; None where uncovered."""
    S, A = emp.n_states, emp.n_actions
    cost = cost or CostMetric.normalized(S, A)
    actions = result.policy.greedy_actions()
    out: List[Optional[WeightedAtoms]] = []
    for s in range(S):
        if not emp.covered[s]:
            out.append(None)
            continue
        points, weights = emp.atoms(s)
        f = np.zeros((A, S))
        f[actions[s]] = result.v_star / behavior.probs[s, actions[s]]
        mu, _ = worst_case_distribution(f.ravel(), WeightedAtoms(points, weights), float(result.rho[s]), cost)
        out.append(mu)
    return out
