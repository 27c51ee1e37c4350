# ope_pipeline/data_module/empirical.py
"""
Per-state empirical conditionals mu_hat(a, s' | s) built from a dataset,
their population counterparts, and the plug-in (sample-average) quantities
derived from them.

Points of the action / next-state space are flattened as z = a * |S| + s'.
"""

import logging
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np

from ope_pipeline.data_module.trajectory import Dataset
from ope_pipeline.errors import InputError, SingularSystemError, UncoveredStatesError
from ope_pipeline.mdp_model.mdp_core import (
    FiniteMdp,
    ImportanceRatio,
    Policy,
    exact_average_visitation,
)

logger = logging.getLogger(__name__)

MissingStateMode = Literal["error", "bound"]
MISSING_STATE_MODES = ("error", "bound")
SPECTRAL_MARGIN = 1e-9


# -------------------------------------------------------------------
# Domain types
# -------------------------------------------------------------------
@dataclass(frozen=True)
class EmpiricalConditional:
    """
    weights[s, a, s'] = mu_hat(a, s' | s); rows of uncovered states are zero.
    n[s] is the transition count at s (inf for population conditionals) and
    state_freq the empirical state distribution n_s / sum n.
    """

    weights: np.ndarray
    n: np.ndarray
    state_freq: np.ndarray
    missing_state: MissingStateMode = "error"

    def __post_init__(self):
        if self.missing_state not in MISSING_STATE_MODES:
            raise InputError(f"missing_state must be one of {MISSING_STATE_MODES}")
        W = np.array(self.weights, dtype=float)
        n = np.array(self.n, dtype=float)
        if W.ndim != 3 or W.shape[0] != W.shape[2] or n.shape != (W.shape[0],):
            raise InputError("weights must be (S, A, S) and n must be (S,)")
        for arr in (W, n):
            arr.setflags(write=False)
        freq = np.array(self.state_freq, dtype=float)
        freq.setflags(write=False)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "state_freq", freq)

    @property
    def n_states(self) -> int:
        return self.weights.shape[0]

    @property
    def n_actions(self) -> int:
        return self.weights.shape[1]

    @property
    def covered(self) -> np.ndarray:
        return self.n > 0

    @property
    def uncovered_states(self) -> np.ndarray:
        return np.flatnonzero(~self.covered)

    @property
    def is_population(self) -> bool:
        return bool(np.all(np.isinf(self.n[self.covered])))

    @property
    def total(self) -> float:
        return float(self.n.sum())

    def action_freq(self) -> np.ndarray:
        """mu_hat(a | s), the action marginal of each conditional."""
        return self.weights.sum(axis=2)

    def atoms(self, s: int) -> Tuple[np.ndarray, np.ndarray]:
        """(points, weights) of mu_hat_s, points ascending in z = a * |S| + s'."""
        flat = self.weights[s].ravel()
        points = np.flatnonzero(flat > 0)
        return points, flat[points]

    def require_coverage(self) -> None:
        missing = self.uncovered_states
        if missing.size:
            raise UncoveredStatesError(missing)

    @classmethod
    def from_population(cls, mdp: FiniteMdp, behavior: Policy) -> "EmpiricalConditional":
        """Exact conditionals pi_b(a|s) P(s'|s,a) with n_s = inf."""
        if behavior.probs.shape != (mdp.n_states, mdp.n_actions):
            raise InputError("behavior policy does not match the MDP dimensions")
        W = behavior.probs[:, :, None] * mdp.transitions
        d_b = exact_average_visitation(mdp, behavior)
        return cls(W, np.full(mdp.n_states, np.inf), d_b)


@dataclass(frozen=True)
class PlugInTransition:
    """P(s, s') = sum_a mu_hat(a, s'|s) beta_s(a) and its row sums."""

    matrix: np.ndarray
    row_sums: np.ndarray


# -------------------------------------------------------------------
# Construction
# -------------------------------------------------------------------
def build_empirical(
    ds: Dataset,
    n_states: int,
    n_actions: int,
    missing_state: MissingStateMode = "error",
) -> EmpiricalConditional:
    if (ds.meta.n_states, ds.meta.n_actions) != (n_states, n_actions):
        raise InputError(
            f"dataset declares ({ds.meta.n_states}, {ds.meta.n_actions}) states/actions, "
            f"expected ({n_states}, {n_actions})"
        )
    counts = np.zeros((n_states, n_actions, n_states), dtype=np.int64)
    np.add.at(counts, (ds.s, ds.a, ds.s_next), 1)
    n = counts.sum(axis=(1, 2))

    missing = np.flatnonzero(n == 0)
    if missing.size:
        if missing_state == "error":
            raise UncoveredStatesError(missing)
        logger.warning(f"[EMP] states {missing.tolist()} are uncovered; bounding their values")

    W = np.zeros(counts.shape)
    pos = n > 0
    W[pos] = counts[pos] / n[pos, None, None]
    total = n.sum()
    freq = n / total if total else np.zeros(n_states)
    logger.debug(f"[EMP] built conditionals from {int(total)} transitions")
    return EmpiricalConditional(W, n.astype(float), freq, missing_state)


# -------------------------------------------------------------------
# Plug-in quantities
# -------------------------------------------------------------------
def _check_beta(emp: EmpiricalConditional, beta: ImportanceRatio) -> None:
    if beta.beta.shape != (emp.n_states, emp.n_actions):
        raise InputError(f"importance ratios {beta.beta.shape} do not match ({emp.n_states}, {emp.n_actions})")


def plug_in_transition(emp: EmpiricalConditional, beta: ImportanceRatio) -> PlugInTransition:
    _check_beta(emp, beta)
    P = np.einsum("sat,sa->st", emp.weights, beta.beta)
    rows = np.einsum("sa,sa->s", emp.action_freq(), beta.beta)
    P.setflags(write=False)
    rows.setflags(write=False)
    return PlugInTransition(P, rows)


def resolvent_solve(matrix: np.ndarray, gamma: float, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
    """
    Solve (I - gamma P) x = rhs (or its transpose) for a nonnegative P.

    Invertibility is certified by gamma * max row sum < 1, or failing that by
    spectral radius gamma * rho(P) < 1, which keeps the Neumann series valid.
    """
    P = np.asarray(matrix, dtype=float)
    row_bound = gamma * float(P.sum(axis=1).max(initial=0.0))
    if row_bound >= 1.0:
        spectral = gamma * float(np.max(np.abs(np.linalg.eigvals(P))))
        if spectral >= 1.0 - SPECTRAL_MARGIN:
            raise SingularSystemError(
                f"I - gamma*P is not certified invertible (gamma*max row sum = {row_bound:.6f}, "
                f"gamma*spectral radius = {spectral:.6f}); collect more data or use robust mode"
            )
        logger.debug(f"[EMP] row-sum certificate failed ({row_bound:.4f}); spectral radius {spectral:.4f} ok")
    A = np.eye(P.shape[0]) - gamma * P
    out = np.linalg.solve(A.T if transpose else A, rhs)
    if not np.all(np.isfinite(out)):
        raise SingularSystemError("plug-in linear system produced non-finite values")
    return out


def plug_in_value(
    emp: EmpiricalConditional,
    beta: ImportanceRatio,
    rewards_under_target: np.ndarray,
    d0: np.ndarray,
    gamma: float,
) -> float:
    """(1 - gamma) d0^T (I - gamma P_mu_hat)^{-1} r_pi."""
    emp.require_coverage()
    P = plug_in_transition(emp, beta)
    v = resolvent_solve(P.matrix, gamma, np.asarray(rewards_under_target, dtype=float))
    return float((1.0 - gamma) * np.asarray(d0) @ v)
