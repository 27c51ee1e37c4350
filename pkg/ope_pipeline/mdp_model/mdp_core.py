# ope_pipeline/mdp_model/mdp_core.py
"""
Finite discounted MDPs, stochastic policies and the exact (model-known)
solvers used as ground truth: visitation distributions, policy values,
value iteration and truncated Q-iteration for behavior policies.

Tables are numpy arrays indexed [state][action][next_state]; all objects are
frozen and their arrays are marked read-only after validation.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from ope_pipeline import settings
from ope_pipeline.errors import AssumptionViolationError, InputError, InternalError, NonConvergenceError

logger = logging.getLogger(__name__)

PROB_ATOL = 1e-12
TIE_ATOL = 1e-12

# A value function is a float vector over states; a visitation distribution a
# probability vector over states. Both are plain arrays.
ValueFunction = np.ndarray
VisitationDistribution = np.ndarray


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# -------------------------------------------------------------------
# Domain types
# -------------------------------------------------------------------
@dataclass(frozen=True)
class FiniteMdp:
    transitions: np.ndarray
    rewards: np.ndarray
    discount: float
    initial_dist: np.ndarray
    name: str = "mdp"

    def __post_init__(self):
        P = _frozen(self.transitions)
        R = _frozen(self.rewards)
        d0 = _frozen(self.initial_dist)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise InputError(f"transitions must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise InputError("an MDP needs at least one state and one action")
        if R.shape != (S, A):
            raise InputError(f"rewards must have shape {(S, A)}, got {R.shape}")
        if d0.shape != (S,):
            raise InputError(f"initial_dist must have shape {(S,)}, got {d0.shape}")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise InputError("transition probabilities must be finite and nonnegative")
        bad = np.argwhere(np.abs(P.sum(axis=2) - 1.0) > PROB_ATOL)
        if bad.size:
            s, a = bad[0]
            raise InputError(f"transition row (s={s}, a={a}) sums to {P[s, a].sum():.15g}, not 1")
        if not np.all(np.isfinite(R)) or np.any(R < 0):
            raise InputError("rewards must be finite and nonnegative")
        if np.any(d0 < 0) or abs(d0.sum() - 1.0) > PROB_ATOL:
            raise InputError("initial_dist must be a probability vector")
        if not 0.0 < float(self.discount) < 1.0:
            raise InputError(f"discount must lie in (0, 1), got {self.discount}")
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "initial_dist", d0)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def with_discount(self, discount: float) -> "FiniteMdp":
        return FiniteMdp(self.transitions, self.rewards, discount, self.initial_dist, self.name)


@dataclass(frozen=True)
class Policy:
    probs: np.ndarray
    deterministic: bool = field(default=False)

    def __post_init__(self):
        pi = _frozen(self.probs)
        if pi.ndim != 2:
            raise InputError(f"policy table must be 2-D (S, A), got shape {pi.shape}")
        if not np.all(np.isfinite(pi)) or np.any(pi < 0):
            raise InputError("policy probabilities must be finite and nonnegative")
        bad = np.flatnonzero(np.abs(pi.sum(axis=1) - 1.0) > PROB_ATOL)
        if bad.size:
            raise InputError(f"policy rows {bad.tolist()} are not probability vectors")
        one_hot = bool(np.all((pi == 1.0).sum(axis=1) == 1))
        if self.deterministic and not one_hot:
            raise InputError("deterministic policy must put probability 1 on exactly one action per state")
        object.__setattr__(self, "probs", pi)
        object.__setattr__(self, "deterministic", bool(self.deterministic or one_hot))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def from_actions(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        if np.any(actions < 0) or np.any(actions >= n_actions):
            raise InputError("action index out of range")
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs, deterministic=True)

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


@dataclass(frozen=True)
class ImportanceRatio:
    """beta[s, a] = pi(a|s) / pi_b(a|s) and the per-state span M_s."""

    beta: np.ndarray
    span: np.ndarray

    @property
    def n_states(self) -> int:
        return self.beta.shape[0]

    @property
    def n_actions(self) -> int:
        return self.beta.shape[1]


# -------------------------------------------------------------------
# Helpers
# -------------------------------------------------------------------
def _check_policy(mdp: FiniteMdp, policy: Policy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise InputError(
            f"policy shape {policy.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def argmax_lowest(q: np.ndarray, atol: float = TIE_ATOL) -> np.ndarray:
    """Row-wise argmax with near-ties resolved to the lowest index."""
    q = np.atleast_2d(q)
    best = q.max(axis=1, keepdims=True)
    near = q >= best - atol * (1.0 + np.abs(best))
    return np.argmax(near, axis=1)


def policy_transition(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    """P_pi(s, s') = sum_a pi(a|s) P(s'|s, a)."""
    _check_policy(mdp, policy)
    return np.einsum("sa,sat->st", policy.probs, mdp.transitions)


def reward_under_policy(rewards: np.ndarray, policy: Policy) -> np.ndarray:
    """r_pi(s) = sum_a pi(a|s) r(s, a)."""
    return np.einsum("sa,sa->s", policy.probs, np.asarray(rewards, dtype=float))


def _solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        out = np.linalg.solve(matrix, rhs)
    except np.linalg.LinAlgError as e:
        raise InternalError(f"singular linear system in exact solver: {e}") from e
    if not np.all(np.isfinite(out)):
        raise InternalError("exact solver produced non-finite values")
    return out


# -------------------------------------------------------------------
# Exact quantities
# -------------------------------------------------------------------
def exact_average_visitation(mdp: FiniteMdp, policy: Policy) -> VisitationDistribution:
    """Solve d = (1 - gamma) d_0 + gamma P_pi^T d."""
    P_pi = policy_transition(mdp, policy)
    gamma = mdp.discount
    A = np.eye(mdp.n_states) - gamma * P_pi.T
    return _solve(A, (1.0 - gamma) * mdp.initial_dist)


def exact_value_function(mdp: FiniteMdp, policy: Policy) -> ValueFunction:
    """Discounted reward-to-go (I - gamma P_pi)^{-1} r_pi (not normalised)."""
    P_pi = policy_transition(mdp, policy)
    r_pi = reward_under_policy(mdp.rewards, policy)
    return _solve(np.eye(mdp.n_states) - mdp.discount * P_pi, r_pi)


def exact_policy_value(mdp: FiniteMdp, policy: Policy) -> float:
    """R_pi = sum_{s,a} d_pi(s) pi(a|s) r(s, a)."""
    d_pi = exact_average_visitation(mdp, policy)
    return float(d_pi @ reward_under_policy(mdp.rewards, policy))


def optimal_policy(
    mdp: FiniteMdp,
    tol: float = settings.VI_TOL,
    max_iter: int = settings.VI_MAX_SWEEPS,
) -> Tuple[Policy, float]:
    """
    Value iteration on the known model. Returns the greedy deterministic policy
    (ties -> lowest action index) and its exact normalised value J*.
    """
    gamma = mdp.discount
    v = np.zeros(mdp.n_states)
    for it in range(1, max_iter + 1):
        q = mdp.rewards + gamma * mdp.transitions @ v
        v_new = q.max(axis=1)
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta < tol:
            break
    else:
        raise NonConvergenceError(
            f"value iteration did not reach tol={tol} in {max_iter} sweeps",
            {"last_delta": delta},
        )
    q = mdp.rewards + gamma * mdp.transitions @ v
    policy = Policy.from_actions(argmax_lowest(q), mdp.n_actions)
    j_star = exact_policy_value(mdp, policy)
    logger.debug(f"[VI] optimal policy for {mdp.name} after {it} sweeps, J*={j_star:.6f}")
    return policy, j_star


def q_iteration_policy(mdp: FiniteMdp, k: int, epsilon: float = settings.DEFAULT_BEHAVIOR_EPSILON) -> Policy:
    """
    k synchronous Bellman-optimality sweeps on Q from Q = 0, then epsilon-greedy
    softening of the greedy action (ties -> lowest index).
    """
    if k < 0:
        raise InputError("k must be nonnegative")
    if not 0.0 <= epsilon <= 1.0:
        raise InputError("epsilon must lie in [0, 1]")
    S, A = mdp.n_states, mdp.n_actions
    q = np.zeros((S, A))
    for _ in range(k):
        q = mdp.rewards + mdp.discount * mdp.transitions @ q.max(axis=1)
    greedy = argmax_lowest(q)
    probs = np.full((S, A), epsilon / A)
    probs[np.arange(S), greedy] += 1.0 - epsilon
    return Policy(probs)


def importance_ratios(target: Policy, behavior: Policy) -> ImportanceRatio:
    if target.probs.shape != behavior.probs.shape:
        raise InputError(f"policy shapes differ: {target.probs.shape} vs {behavior.probs.shape}")
    pi, pi_b = target.probs, behavior.probs
    violations = np.argwhere((pi > 0) & (pi_b <= 0))
    if violations.size:
        raise AssumptionViolationError(map(tuple, violations))
    beta = np.zeros_like(pi)
    support = pi_b > 0
    beta[support] = pi[support] / pi_b[support]
    span = beta.max(axis=1) - beta.min(axis=1)
    return ImportanceRatio(_frozen(beta), _frozen(span))


def marginal_ratio(mdp: FiniteMdp, target: Policy, behavior: Policy) -> np.ndarray:
    """w(s) = d_pi(s) / d_pi_b(s)."""
    d_pi = exact_average_visitation(mdp, target)
    d_b = exact_average_visitation(mdp, behavior)
    missing = np.flatnonzero((d_b <= 0) & (d_pi > 0))
    if missing.size:
        raise InputError(f"d_pi_b vanishes at states {missing.tolist()} visited by the target")
    w = np.zeros_like(d_pi)
    pos = d_b > 0
    w[pos] = d_pi[pos] / d_b[pos]
    return w


def stationarity_residual(
    mdp: FiniteMdp,
    target: Policy,
    behavior: Policy,
    w: Optional[np.ndarray] = None,
) -> float:
    """
    Largest violation over s' of
    w(s') d_b(s') = (1 - gamma) d_0(s') + gamma sum_{s,a} d_b(s,a,s') beta_s(a) w(s).
    """
    gamma = mdp.discount
    d_b = exact_average_visitation(mdp, behavior)
    beta = importance_ratios(target, behavior).beta
    if w is None:
        w = marginal_ratio(mdp, target, behavior)
    d_sas = d_b[:, None, None] * behavior.probs[:, :, None] * mdp.transitions
    rhs = (1.0 - gamma) * mdp.initial_dist + gamma * np.einsum("sat,sa,s->t", d_sas, beta, w)
    return float(np.max(np.abs(w * d_b - rhs)))
