# ope_pipeline/estimation/adversarial_eval.py
"""
Adversarial value estimation under environment shift: the robust value at
fixed radii computed from logged data, its plug-in asymptotic variance
y^T D Lambda D y, and the resulting normal confidence interval.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
from scipy.stats import norm

from ope_pipeline import settings
from ope_pipeline.data_module.empirical import EmpiricalConditional, resolvent_solve
from ope_pipeline.errors import InputError, InternalError
from ope_pipeline.estimation.robust_eval import (
    ConfidenceInterval,
    RadiusSchedule,
    RobustEstimate,
    contraction_diagnostics,
    robust_value_iteration,
)
from ope_pipeline.mdp_model.mdp_core import ImportanceRatio, Policy, reward_under_policy
from ope_pipeline.wdro_module.cost_metric import CostMetric
from ope_pipeline.wdro_module.solver import WeightedAtoms, worst_case_distribution

logger = logging.getLogger(__name__)

VARIANCE_ATOL = 1e-9


@dataclass
class AdversarialEstimate:
    value: float
    sigma2: float
    T: int
    ci: ConfidenceInterval
    estimate: Optional[RobustEstimate] = None
    flags: Dict[str, Any] = field(default_factory=dict)

    @property
    def std_error(self) -> float:
        return float(np.sqrt(self.sigma2 / self.T))

    def to_record(self) -> Dict[str, Any]:
        return {
            "value": self.value,
            "sigma2": self.sigma2,
            "T": self.T,
            "std_error": self.std_error,
            "ci": self.ci.to_record(),
            "estimate": None if self.estimate is None else self.estimate.to_record(),
            "flags": self.flags,
        }


def adversarial_estimate(
    emp: EmpiricalConditional,
    beta: ImportanceRatio,
    target: Policy,
    rewards: np.ndarray,
    d0: np.ndarray,
    gamma: float,
    rho_fixed,
    cost: Optional[CostMetric] = None,
    tol: float = settings.VI_TOL,
    clip_to_bound: bool = False,
) -> RobustEstimate:
    """L_mu_hat(rho) at the given per-state radii."""
    cost = cost or CostMetric.normalized(emp.n_states, emp.n_actions)
    schedule = rho_fixed if isinstance(rho_fixed, RadiusSchedule) else RadiusSchedule.fixed(rho_fixed, cost.diam)
    if schedule.n_states != emp.n_states:
        raise InputError(f"expected {emp.n_states} radii, got {schedule.n_states}")

    report = contraction_diagnostics(beta, emp, schedule, gamma, cost=cost)
    slack = (1.0 - gamma) / gamma - schedule.rho * report.lipschitz
    violated = np.flatnonzero((slack <= 0) & emp.covered)
    if violated.size:
        logger.warning(
            f"[ADV] rho_s ||beta_s||_Lip >= (1 - gamma)/gamma at states {violated.tolist()}; "
            "the asymptotic theory does not cover these radii"
        )
    est = robust_value_iteration(target, beta, rewards, emp, schedule, gamma, d0, tol=tol, cost=cost,
                                 clip_to_bound=clip_to_bound)
    est.diagnostics["adversarial_slack"] = slack.tolist()
    return est


def worst_case_conditionals(
    v: np.ndarray,
    beta: ImportanceRatio,
    emp: EmpiricalConditional,
    rho: np.ndarray,
    cost: Optional[CostMetric] = None,
) -> np.ndarray:
    """mu*(a, s'|s) per state at the value function v, as an (S, A, S) table."""
    S, A = emp.n_states, emp.n_actions
    cost = cost or CostMetric.normalized(S, A)
    out = np.zeros((S, A, S))
    for s in np.flatnonzero(emp.covered):
        points, weights = emp.atoms(s)
        f = np.outer(beta.beta[s], v).ravel()
        mu, _ = worst_case_distribution(f, WeightedAtoms(points, weights), float(rho[s]), cost)
        out[s] = mu.dense(S * A).reshape(A, S)
    return out


def asymptotic_variance(
    emp: EmpiricalConditional,
    beta: ImportanceRatio,
    target: Policy,
    rewards: np.ndarray,
    d0: np.ndarray,
    gamma: float,
    mu_star: np.ndarray,
) -> float:
    """
    sigma^2 = y^T D Lambda D y with
    y_{s,a,s'} = gamma (1 - gamma) [(I - gamma P*^T)^{-1} d0]_s [(I - gamma P*)^{-1} r_pi]_{s'} beta_s(a),
    D = diag(1 / sqrt(d_b(s))) and Lambda the block-diagonal multinomial
    covariance of mu_hat(., .|s). d_b is the empirical state frequency.
    """
    emp.require_coverage()
    S, A = emp.n_states, emp.n_actions
    mu_star = np.asarray(mu_star, dtype=float)
    if mu_star.shape != (S, A, S):
        raise InputError(f"mu_star must have shape {(S, A, S)}")
    d_b = emp.state_freq
    if np.any(d_b <= 0):
        raise InputError("state frequencies must be positive for the variance plug-in")

    P_star = np.einsum("sa,sat->st", beta.beta, mu_star)
    r_pi = reward_under_policy(rewards, target)
    left = resolvent_solve(P_star, gamma, np.asarray(d0, dtype=float), transpose=True)
    right = resolvent_solve(P_star, gamma, r_pi)
    y = gamma * (1.0 - gamma) * left[:, None, None] * beta.beta[:, :, None] * right[None, None, :]

    W = emp.weights
    mean = np.einsum("sat,sat->s", W, y)
    second = np.einsum("sat,sat->s", W, y ** 2)
    sigma2 = float(np.sum((second - mean ** 2) / d_b))
    if sigma2 < 0:
        if sigma2 < -VARIANCE_ATOL:
            raise InternalError(f"negative asymptotic variance {sigma2:.3g}")
        logger.warning(f"[ADV] clipped tiny negative variance {sigma2:.3g} to 0")
        sigma2 = 0.0
    return sigma2


def adversarial_ci(value: float, sigma2: float, T: int, alpha: float = settings.DEFAULT_ALPHA) -> ConfidenceInterval:
    """value +/- z_{1 - alpha/2} sqrt(sigma2 / T)."""
    if T < 1:
        raise InputError("T must be at least 1")
    if sigma2 < 0:
        raise InputError("sigma2 must be nonnegative")
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    half = float(norm.ppf(1.0 - alpha / 2.0)) * float(np.sqrt(sigma2 / T))
    return ConfidenceInterval(value - half, value + half, 0.0, 1.0 - alpha, False)


def adversarial_evaluation(
    emp: EmpiricalConditional,
    beta: ImportanceRatio,
    target: Policy,
    rewards: np.ndarray,
    d0: np.ndarray,
    gamma: float,
    rho_fixed,
    alpha: float = settings.DEFAULT_ALPHA,
    cost: Optional[CostMetric] = None,
    tol: float = settings.VI_TOL,
) -> AdversarialEstimate:
    """Estimate, worst-case conditionals at the fixed point, variance and interval."""
    cost = cost or CostMetric.normalized(emp.n_states, emp.n_actions)
    est = adversarial_estimate(emp, beta, target, rewards, d0, gamma, rho_fixed, cost=cost, tol=tol)
    mu_star = worst_case_conditionals(est.v, beta, emp, est.rho, cost)
    sigma2 = asymptotic_variance(emp, beta, target, rewards, d0, gamma, mu_star)
    T = int(emp.total)
    ci = adversarial_ci(est.bound, sigma2, T, alpha)
    logger.info(f"[ADV] L={est.bound:.6f} sigma2={sigma2:.6g} T={T}")
    return AdversarialEstimate(est.bound, sigma2, T, ci, est, {"variance": "plug-in d_b and mu*"})


def load_fixed_radii(mapping: Dict[Any, float], n_states: int) -> np.ndarray:
    """Per-state radii from a {state index: rho} map; missing states get 0."""
    rho = np.zeros(n_states)
    for key, value in mapping.items():
        try:
            s = int(key)
        except (TypeError, ValueError):
            raise InputError(f"radius key {key!r} is not a state index") from None
        if not 0 <= s < n_states:
            raise InputError(f"radius key {s} outside [0, {n_states})")
        if float(value) < 0:
            raise InputError(f"radius for state {s} is negative")
        rho[s] = float(value)
    return rho


def radii_record(rho) -> Dict[str, float]:
    return {str(s): float(r) for s, r in enumerate(np.asarray(rho, dtype=float))}
