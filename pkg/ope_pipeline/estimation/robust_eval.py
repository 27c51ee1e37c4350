# ope_pipeline/estimation/robust_eval.py
"""
Robust / optimistic off-policy evaluation by value iteration over
s-rectangular Wasserstein balls around the empirical conditionals, the
radius schedules that turn the resulting bounds into confidence intervals,
the plug-in correction term and the interval assembly.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Literal, Optional

import numpy as np

from ope_pipeline import settings
from ope_pipeline.data_module.empirical import EmpiricalConditional, plug_in_transition, resolvent_solve
from ope_pipeline.errors import InputError, InternalError, NonConvergenceError
from ope_pipeline.mdp_model.mdp_core import ImportanceRatio, Policy, reward_under_policy
from ope_pipeline.wdro_module.cost_metric import CostMetric
from ope_pipeline.wdro_module.solver import lipschitz_norm, solve_robust_dual

logger = logging.getLogger(__name__)

Sense = Literal["robust", "optimistic"]
ScheduleMode = Literal["nonasymptotic", "asymptotic", "fixed"]
ORDER_ATOL = 1e-9


def _finite_or_none(x) -> Optional[float]:
    x = float(x)
    return x if np.isfinite(x) else None


# -------------------------------------------------------------------
# Radius schedules
# -------------------------------------------------------------------
@dataclass(frozen=True)
class RadiusSchedule:
    """Per-state radii and the parameters that produced them."""

    rho: np.ndarray
    diam: float
    mode: ScheduleMode
    tau: Optional[np.ndarray] = None
    n: Optional[np.ndarray] = None
    alpha: Optional[float] = None
    M: Optional[float] = None

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float)
        if rho.ndim != 1 or np.any(~np.isfinite(rho)) or np.any(rho < 0):
            raise InputError("radii must be a finite nonnegative vector")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @property
    def n_states(self) -> int:
        return self.rho.size

    def recompute(self) -> np.ndarray:
        """sqrt(2 tau_s / n_s) * diam from the stored parameters."""
        if self.mode == "fixed" or self.tau is None or self.n is None:
            return self.rho.copy()
        out = np.zeros_like(self.rho)
        pos = self.n > 0
        out[pos] = np.sqrt(2.0 * self.tau[pos] / self.n[pos]) * self.diam
        return out

    def scaled(self, factor: float) -> "RadiusSchedule":
        return RadiusSchedule.fixed(self.rho * float(factor), self.diam)

    def to_record(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "rho": self.rho.tolist(),
            "tau": None if self.tau is None else self.tau.tolist(),
            "alpha": self.alpha,
            "M": self.M,
            "diam": self.diam,
        }

    @classmethod
    def fixed(cls, rho, diam: float) -> "RadiusSchedule":
        return cls(np.asarray(rho, dtype=float), float(diam), "fixed")


def default_value_bound(rewards: np.ndarray, gamma: float) -> float:
    """M = 2 r_max / (1 - gamma)."""
    return 2.0 * float(np.max(rewards)) / (1.0 - gamma)


def radius_schedule(
    emp: EmpiricalConditional,
    tau: float,
    log_offsets: np.ndarray,
    diam: float,
    mode: ScheduleMode = "asymptotic",
    alpha: Optional[float] = None,
    M: Optional[float] = None,
) -> RadiusSchedule:
    """rho_s = sqrt(2 tau_s / n_s) * diam with tau_s = tau + log_offsets[s], clipped at 0."""
    if emp.missing_state == "error":
        emp.require_coverage()
    n = emp.n
    covered = emp.covered
    if np.any(~np.isfinite(n[covered])):
        raise InputError("radius schedules need finite sample counts (got population conditionals)")
    tau_s = np.zeros(emp.n_states)
    tau_s[covered] = tau + np.asarray(log_offsets, dtype=float)[covered]
    negative = np.flatnonzero(tau_s < 0)
    if negative.size:
        logger.warning(f"[VI] tau_s < 0 at states {negative.tolist()}; clipped to 0")
        tau_s[negative] = 0.0
    rho = np.zeros(emp.n_states)
    rho[covered] = np.sqrt(2.0 * tau_s[covered] / n[covered]) * diam
    tau_s.setflags(write=False)
    return RadiusSchedule(rho, float(diam), mode, tau_s, n.copy(), alpha, M)


def check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")


def radius_for_ci(emp: EmpiricalConditional, alpha: float, M: float, diam: float) -> RadiusSchedule:
    """tau = log(2|S| / alpha), tau_s = tau + log(2 n_s M)."""
    check_alpha(alpha)
    if M <= 0:
        raise InputError("value bound M must be positive")
    tau = float(np.log(2 * emp.n_states / alpha))
    with np.errstate(divide="ignore"):
        offsets = np.log(2.0 * emp.n * M)
    return radius_schedule(emp, tau, offsets, diam, "asymptotic", alpha, M)


# -------------------------------------------------------------------
# Estimates
# -------------------------------------------------------------------
@dataclass
class RobustEstimate:
    v: np.ndarray
    bound: float
    lam: np.ndarray
    iterations: int
    sup_norm_residual: float
    kind: Sense
    rho: np.ndarray
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    flags: Dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        return {
            "bound": self.bound,
            "kind": self.kind,
            "v": self.v.tolist(),
            "lambda": [_finite_or_none(x) for x in self.lam],
            "rho": self.rho.tolist(),
            "iterations": self.iterations,
            "sup_norm_residual": self.sup_norm_residual,
            "diagnostics": self.diagnostics,
            "flags": self.flags,
        }


class RobustBellmanOperator:
    """
    T v (s) = r_pi(s) + gamma * inner_s(v), where inner_s is the min (robust)
    or max (optimistic) of E[v(s') beta_s(a)] over the rho_s-ball around mu_hat_s.
    Uncovered states are pinned to 0 (robust) or M (optimistic) when the
    conditionals allow it.
    """

    def __init__(
        self,
        r_pi: np.ndarray,
        beta: ImportanceRatio,
        emp: EmpiricalConditional,
        rho: np.ndarray,
        gamma: float,
        cost: CostMetric,
        kind: Sense = "robust",
        M: Optional[float] = None,
    ):
        if kind not in ("robust", "optimistic"):
            raise InputError(f"kind must be 'robust' or 'optimistic', got {kind!r}")
        S, A = emp.n_states, emp.n_actions
        if beta.beta.shape != (S, A) or np.shape(r_pi) != (S,) or np.shape(rho) != (S,):
            raise InputError("dimensions of rewards, ratios, radii and conditionals disagree")
        if (cost.n_states, cost.n_actions) != (S, A):
            raise InputError("cost metric does not match the state/action space")
        if emp.missing_state == "error":
            emp.require_coverage()
        self.r_pi = np.asarray(r_pi, dtype=float)
        self.beta = beta.beta
        self.gamma = float(gamma)
        self.kind = kind
        self.sign = 1.0 if kind == "robust" else -1.0
        self.rho = np.asarray(rho, dtype=float)
        self.M = M
        self.covered = emp.covered
        self.P = plug_in_transition(emp, beta).matrix
        self.atoms = []
        for s in range(S):
            points, weights = emp.atoms(s)
            self.atoms.append((points, weights, cost.table[points] if points.size else None))
        self.uncovered_value = 0.0 if kind == "robust" else (M if M is not None else 0.0)

    @property
    def n_states(self) -> int:
        return self.r_pi.size

    def __call__(self, v: np.ndarray):
        """Return (T v, lambda*) with lambda* = inf where rho_s = 0."""
        v = np.asarray(v, dtype=float)
        out = self.r_pi + self.gamma * (self.P @ v)
        lam = np.full(self.n_states, np.inf)
        for s in np.flatnonzero(self.rho > 0):
            if not self.covered[s]:
                continue
            points, weights, C = self.atoms[s]
            F = self.sign * np.outer(self.beta[s], v).ravel()
            value, lam[s] = solve_robust_dual(F, C, weights, self.rho[s])
            out[s] = self.r_pi[s] + self.gamma * self.sign * value
        out[~self.covered] = self.uncovered_value
        return out, lam


def _iterate(
    op: RobustBellmanOperator,
    d0: np.ndarray,
    tol: float,
    max_sweeps: int,
    M: float,
    clip_to_bound: bool,
) -> RobustEstimate:
    if tol <= 0:
        raise InputError("tol must be positive")
    limit = settings.DIVERGENCE_FACTOR * M
    v = np.zeros(op.n_states)
    delta = np.inf
    for it in range(1, max_sweeps + 1):
        v_new, lam = op(v)
        if clip_to_bound:
            v_new = np.clip(v_new, -M, M)
        if not np.all(np.isfinite(v_new)) or np.max(np.abs(v_new)) > limit:
            raise NonConvergenceError(
                f"{op.kind} value iteration diverged after {it} sweeps (|v| exceeded {limit:.4g}); "
                "the radii are outside the contraction regime, consider --clip-values",
                {"sweeps": it, "max_abs_v": float(np.max(np.abs(v_new))), "limit": limit},
            )
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta < tol:
            break
    else:
        raise NonConvergenceError(
            f"{op.kind} value iteration did not reach tol={tol} in {max_sweeps} sweeps",
            {"sweeps": max_sweeps, "last_delta": delta, "max_abs_v": float(np.max(np.abs(v)))},
        )
    if np.max(np.abs(v)) > M:
        logger.warning(f"[VI] {op.kind} values exceed the bound M={M:.4g} (max |v| = {np.max(np.abs(v)):.4g})")
    bound = float((1.0 - op.gamma) * np.asarray(d0) @ v)
    logger.debug(f"[VI] {op.kind} bound {bound:.6f} after {it} sweeps")
    return RobustEstimate(
        v=v,
        bound=bound,
        lam=lam,
        iterations=it,
        sup_norm_residual=delta,
        kind=op.kind,
        rho=op.rho.copy(),
        flags={"clip_to_bound": clip_to_bound, "value_bound": M},
    )


def _value_iteration(
    kind: Sense,
    target: Policy,
    beta: ImportanceRatio,
    rewards: np.ndarray,
    emp: EmpiricalConditional,
    schedule: RadiusSchedule,
    gamma: float,
    d0: np.ndarray,
    tol: float,
    cost: Optional[CostMetric],
    M: Optional[float],
    max_sweeps: int,
    clip_to_bound: bool,
) -> RobustEstimate:
    cost = cost or CostMetric.normalized(emp.n_states, emp.n_actions)
    M = default_value_bound(rewards, gamma) if M is None else float(M)
    r_pi = reward_under_policy(rewards, target)
    op = RobustBellmanOperator(r_pi, beta, emp, schedule.rho, gamma, cost, kind, M)
    est = _iterate(op, d0, tol, max_sweeps, M, clip_to_bound)
    est.flags["schedule_mode"] = schedule.mode
    est.diagnostics = contraction_diagnostics(beta, emp, schedule, gamma, cost=cost).to_record()
    return est


def robust_value_iteration(
    target: Policy,
    beta: ImportanceRatio,
    rewards: np.ndarray,
    emp: EmpiricalConditional,
    schedule: RadiusSchedule,
    gamma: float,
    d0: np.ndarray,
    tol: float = settings.VI_TOL,
    cost: Optional[CostMetric] = None,
    M: Optional[float] = None,
    max_sweeps: int = settings.VI_MAX_SWEEPS,
    clip_to_bound: bool = False,
) -> RobustEstimate:
    """Lower bound L = (1 - gamma) d0^T v for the robust fixed point v."""
    return _value_iteration("robust", target, beta, rewards, emp, schedule, gamma, d0,
                            tol, cost, M, max_sweeps, clip_to_bound)


def optimistic_value_iteration(
    target: Policy,
    beta: ImportanceRatio,
    rewards: np.ndarray,
    emp: EmpiricalConditional,
    schedule: RadiusSchedule,
    gamma: float,
    d0: np.ndarray,
    tol: float = settings.VI_TOL,
    cost: Optional[CostMetric] = None,
    M: Optional[float] = None,
    max_sweeps: int = settings.VI_MAX_SWEEPS,
    clip_to_bound: bool = False,
) -> RobustEstimate:
    """Upper bound U = (1 - gamma) d0^T v for the optimistic fixed point v."""
    return _value_iteration("optimistic", target, beta, rewards, emp, schedule, gamma, d0,
                            tol, cost, M, max_sweeps, clip_to_bound)


# -------------------------------------------------------------------
# Diagnostics
# -------------------------------------------------------------------
@dataclass
class ContractionReport:
    lipschitz: np.ndarray
    margin: np.ndarray
    passed: np.ndarray
    eps: np.ndarray
    min_samples_ratio: float
    required_samples_ratio: float
    probability: float

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))

    def to_record(self) -> Dict[str, Any]:
        return {
            "lipschitz": self.lipschitz.tolist(),
            "margin": self.margin.tolist(),
            "passed": self.passed.tolist(),
            "eps": self.eps.tolist(),
            "all_passed": self.all_passed,
            "min_samples_ratio": _finite_or_none(self.min_samples_ratio),
            "required_samples_ratio": self.required_samples_ratio,
            "probability": self.probability,
        }


def default_eps(gamma: float) -> float:
    return (1.0 - gamma) / (4.0 * gamma)


def ratio_function(beta: ImportanceRatio, s: int, n_states: int) -> np.ndarray:
    """beta_s(a) laid out on the points z = a * |S| + s'."""
    return np.repeat(beta.beta[s], n_states)


def contraction_diagnostics(
    beta: ImportanceRatio,
    emp: EmpiricalConditional,
    schedule: RadiusSchedule,
    gamma: float,
    eps=None,
    cost: Optional[CostMetric] = None,
    tau_report: float = settings.DEFAULT_ALPHA,
) -> ContractionReport:
    """
    Per state: ||beta_s||_Lip over supp mu_hat_s, the margin
    (1 - gamma)/(2 gamma) - eps_s - rho_s ||beta_s||_Lip, and pass/fail; plus
    the sample-size report min_s n_s / M_s^2 against
    gamma^2/(1 - gamma)^2 log(|S| / tau_report) and the probability
    1 - sum_s exp(-2 n_s eps_s^2 / M_s^2) that the contraction event holds.
    """
    S = emp.n_states
    cost = cost or CostMetric.normalized(S, emp.n_actions)
    eps = np.full(S, default_eps(gamma)) if eps is None else np.broadcast_to(np.asarray(eps, dtype=float), (S,))
    lip = np.zeros(S)
    for s in np.flatnonzero(emp.covered):
        points, _ = emp.atoms(s)
        lip[s] = lipschitz_norm(ratio_function(beta, s, S), points, cost)
    margin = (1.0 - gamma) / (2.0 * gamma) - eps - schedule.rho * lip
    passed = (margin >= 0) | ~emp.covered

    span2 = beta.span ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(span2 > 0, emp.n / np.where(span2 > 0, span2, 1.0), np.inf)
        tails = np.where(span2 > 0, np.exp(-2.0 * emp.n * eps ** 2 / np.where(span2 > 0, span2, 1.0)), 0.0)
    required = gamma ** 2 / (1.0 - gamma) ** 2 * float(np.log(S / tau_report))
    return ContractionReport(
        lipschitz=lip,
        margin=margin,
        passed=passed,
        eps=np.array(eps, dtype=float),
        min_samples_ratio=float(ratios[emp.covered].min(initial=np.inf)),
        required_samples_ratio=required,
        probability=float(1.0 - tails[emp.covered].sum()),
    )


# -------------------------------------------------------------------
# Confidence intervals
# -------------------------------------------------------------------
@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    correction: float
    nominal_level: float
    corrected: bool

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_record(self) -> Dict[str, Any]:
        return {
            "lower": self.lower,
            "upper": self.upper,
            "correction": self.correction,
            "nominal_level": self.nominal_level,
            "corrected": self.corrected,
        }


def correction_term(emp: EmpiricalConditional, beta: ImportanceRatio, gamma: float, d0: np.ndarray) -> float:
    """d0^T (I - gamma P_mu_hat)^{-1} eps with eps_s = 6 / n_s (plug-in for the true kernel)."""
    emp.require_coverage()
    eps = 6.0 / emp.n
    P = plug_in_transition(emp, beta).matrix
    return float(np.asarray(d0) @ resolvent_solve(P, gamma, eps))


def confidence_interval(
    L: float,
    U: float,
    correction: float,
    alpha: float,
    corrected: bool = True,
) -> ConfidenceInterval:
    if L > U + ORDER_ATOL:
        raise InternalError(f"lower bound {L:.12g} exceeds upper bound {U:.12g}")
    if L > U:
        L = U = 0.5 * (L + U)
    pad = correction if corrected else 0.0
    return ConfidenceInterval(L - pad, U + pad, float(correction), 1.0 - alpha, corrected)


def interval_length_bound(
    emp: EmpiricalConditional,
    beta: ImportanceRatio,
    schedule: RadiusSchedule,
    gamma: float,
    M: float,
    d0: np.ndarray,
    cost: Optional[CostMetric] = None,
) -> float:
    """
    2 d0^T (I - gamma P_mu_hat)^{-1} eps with
    eps_s = gamma rho_s max_{|v| <= M} ||beta_s v||_Lip over supp mu_hat_s.
    """
    S, A = emp.n_states, emp.n_actions
    cost = cost or CostMetric.normalized(S, A)
    a_idx, s_idx = np.divmod(np.arange(S * A), S)
    off = ~np.eye(S * A, dtype=bool)
    eps = np.zeros(S)
    for s in np.flatnonzero(emp.covered & (schedule.rho > 0)):
        points, _ = emp.atoms(s)
        b = beta.beta[s][a_idx]
        same_next = s_idx[:, None] == s_idx[None, points]
        num = np.where(same_next, np.abs(b[:, None] - b[None, points]), b[:, None] + b[None, points]) * M
        C = cost.table[:, points]
        mask = off[:, points]
        eps[s] = gamma * schedule.rho[s] * float(np.max(num[mask] / C[mask], initial=0.0))
    if not np.any(eps):
        return 0.0
    P = plug_in_transition(emp, beta).matrix
    return float(2.0 * np.asarray(d0) @ resolvent_solve(P, gamma, eps))
