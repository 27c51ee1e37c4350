# ope_pipeline/wdro_module/solver.py
"""
Exact inner solves of Wasserstein-DRO problems over a finite support.

For a nominal distribution sum_i w_i delta_{z_i}, a radius rho > 0 and a
function f on the points, the worst-case expectation
    min { E_mu[f] : W_c(mu, mu_hat) <= rho }
equals the one-dimensional concave dual
    phi(lambda) = -lambda rho + sum_i w_i min_z { f(z) + lambda c(z, z_i) },  lambda >= 0.

Each inner minimum h_i is a lower envelope of lines in lambda whose slopes are
costs. phi is piecewise linear and its kinks are exactly the envelope
breakpoints, so the maximiser is located by walking the envelopes and then
accumulating the right derivative -rho + sum_i w_i c_i(lambda) over the
sorted breakpoints. The optimistic problem is the mirror image: it is solved
as the negated robust problem of -f.

The primal worst case is recovered from lambda*: every atom moves to a
minimiser of f(z) + lambda* c(z, z_i); where minimisers tie, mass is split
between the cheapest and the most expensive tied destination so that the
plan uses the full budget rho whenever lambda* > 0. Assigning by slope
ratio alone is not primal optimal here.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from ope_pipeline.errors import InputError, InternalError
from ope_pipeline.wdro_module.cost_metric import CostMetric

logger = logging.getLogger(__name__)

TIE_ATOL = 1e-12
GAP_RTOL = 1e-8
BUDGET_ATOL = 1e-10


# -------------------------------------------------------------------
# Domain types
# -------------------------------------------------------------------
@dataclass(frozen=True)
class WeightedAtoms:
    """Distinct points with positive weights summing to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.points, dtype=np.int64).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if z.size == 0 or z.shape != w.shape:
            raise InputError("atoms must be a nonempty list of (point, weight) pairs")
        if np.unique(z).size != z.size:
            raise InputError("atom points must be distinct")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise InputError("atom weights must form a probability vector")
        order = np.argsort(z, kind="stable")
        z, w = z[order], w[order]
        z.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", z)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return int(self.points.size)

    def dense(self, n_points: int) -> np.ndarray:
        out = np.zeros(n_points)
        out[self.points] = self.weights
        return out

    def mean(self, f: np.ndarray) -> float:
        return float(self.weights @ np.asarray(f, dtype=float).ravel()[self.points])

    @classmethod
    def from_dense(cls, probs: np.ndarray) -> "WeightedAtoms":
        probs = np.asarray(probs, dtype=float).ravel()
        points = np.flatnonzero(probs > 0)
        return cls(points, probs[points] / probs[points].sum())


def _as_f(f, cost: CostMetric) -> np.ndarray:
    F = np.asarray(f, dtype=float).ravel()
    if F.size != cost.n_points:
        raise InputError(f"function has {F.size} entries, cost space has {cost.n_points} points")
    if not np.all(np.isfinite(F)):
        raise InputError("function values must be finite")
    return F


def _check_rho(rho: float) -> float:
    rho = float(rho)
    if not rho >= 0.0:
        raise InputError(f"radius must be nonnegative, got {rho}")
    return rho


def cost_to_atoms(cost: CostMetric, atoms: WeightedAtoms) -> np.ndarray:
    """C[i, z] = c(z, z_i)."""
    return cost.table[atoms.points]


# -------------------------------------------------------------------
# Slopes
# -------------------------------------------------------------------
def global_slope(f, z: int, cost: CostMetric) -> float:
    """max over z' != z of (f(z') - f(z)) / c(z', z)."""
    F = _as_f(f, cost)
    if cost.n_points < 2:
        raise InputError("global slope needs at least two points")
    if not 0 <= z < cost.n_points:
        raise InputError(f"point index z={z} outside 0..{cost.n_points - 1}")
    others = np.arange(cost.n_points) != z
    return float(np.max((F[others] - F[z]) / cost.table[others, z]))


def lipschitz_norm(f, support: Iterable[int], cost: CostMetric) -> float:
    """Largest global slope of f over the points of `support`."""
    F = _as_f(f, cost)
    support = np.unique(np.asarray(list(support), dtype=np.int64))
    if support.size == 0:
        raise InputError("support must be nonempty")
    if cost.n_points < 2:
        return 0.0
    C = cost.table[:, support]
    diff = F[:, None] - F[support][None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        slopes = np.where(C > 0, diff / np.where(C > 0, C, 1.0), -np.inf)
    return float(slopes.max())


# -------------------------------------------------------------------
# Dual kernel
# -------------------------------------------------------------------
def _envelope_breakpoints(F: np.ndarray, C: np.ndarray):
    """
    Walk the lower envelopes h_i(lambda) = min_z F[z] + lambda C[i, z] for
    lambda >= 0. Returns the right-active cost at lambda = 0 per atom and the
    breakpoints as (lambda, atom, cost before, cost after).
    """
    n_atoms = C.shape[0]
    scale = 1.0 + float(np.max(np.abs(F)))
    rows = np.arange(n_atoms)

    fmin = F.min()
    ties0 = F <= fmin + TIE_ATOL * scale
    cur = np.argmin(np.where(ties0[None, :], C, np.inf), axis=1)
    start_cost = C[rows, cur]

    lam_cur = np.zeros(n_atoms)
    bp_lam, bp_atom, bp_before, bp_after = [], [], [], []
    active = start_cost > 0
    while np.any(active):
        idx = rows[active]
        c_cur = C[idx, cur[idx]]
        f_cur = F[cur[idx]]
        Csub = C[idx]
        cheaper = Csub < c_cur[:, None] - TIE_ATOL
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(cheaper, (F[None, :] - f_cur[:, None]) / (c_cur[:, None] - Csub), np.inf)
        lam = np.maximum(lam, lam_cur[idx][:, None])
        nxt_lam = lam.min(axis=1)
        tol = TIE_ATOL * (1.0 + np.abs(nxt_lam))
        tied = lam <= (nxt_lam + tol)[:, None]
        nxt = np.argmin(np.where(tied, Csub, np.inf), axis=1)
        bp_lam.append(nxt_lam)
        bp_atom.append(idx)
        bp_before.append(c_cur)
        bp_after.append(Csub[np.arange(idx.size), nxt])
        cur[idx] = nxt
        lam_cur[idx] = nxt_lam
        active = C[rows, cur] > 0

    if bp_lam:
        return start_cost, (np.concatenate(bp_lam), np.concatenate(bp_atom),
                            np.concatenate(bp_before), np.concatenate(bp_after))
    empty = np.zeros(0)
    return start_cost, (empty, empty.astype(np.int64), empty, empty)


def dual_objective(F: np.ndarray, C: np.ndarray, w: np.ndarray, rho: float, lam: float) -> float:
    return float(-lam * rho + w @ np.min(F[None, :] + lam * C, axis=1))


def solve_robust_dual(F: np.ndarray, C: np.ndarray, w: np.ndarray, rho: float) -> Tuple[float, float]:
    """
    Maximise phi over lambda >= 0 given F (points), C (atoms x points) and the
    atom weights w. rho must be positive.
    """
    start_cost, (lam, atom, before, after) = _envelope_breakpoints(F, C)
    g = -rho + float(w @ start_cost)
    if g <= TIE_ATOL:
        return float(F.min()), 0.0

    order = np.lexsort((atom, lam))
    slope = g + np.cumsum(w[atom[order]] * (after[order] - before[order]))
    hit = np.flatnonzero(slope <= TIE_ATOL)
    k = int(hit[0]) if hit.size else lam.size - 1
    lam_star = float(lam[order][k])
    return dual_objective(F, C, w, rho, lam_star), lam_star


# -------------------------------------------------------------------
# Inner problems
# -------------------------------------------------------------------
def robust_inner(f, atoms: WeightedAtoms, rho: float, cost: CostMetric) -> Tuple[float, float]:
    """
    (min over the rho-ball around `atoms` of E[f], attaining lambda*).
    rho = 0 returns the weighted mean and lambda* = inf.
    """
    F = _as_f(f, cost)
    rho = _check_rho(rho)
    if rho == 0.0:
        return atoms.mean(F), float("inf")
    return solve_robust_dual(F, cost_to_atoms(cost, atoms), atoms.weights, rho)


def optimistic_inner(f, atoms: WeightedAtoms, rho: float, cost: CostMetric) -> Tuple[float, float]:
    """(max over the rho-ball of E[f], minimising lambda*) via the mirrored robust dual."""
    value, lam = robust_inner(-_as_f(f, cost), atoms, rho, cost)
    return -value, lam


def worst_case_distribution(
    f,
    atoms: WeightedAtoms,
    rho: float,
    cost: CostMetric,
    maximize: bool = False,
) -> Tuple[WeightedAtoms, float]:
    """
    A distribution attaining robust_inner (or optimistic_inner when
    `maximize`) together with the transport cost of the plan that builds it
    from `atoms`.
    """
    F = _as_f(f, cost)
    rho = _check_rho(rho)
    if maximize:
        F = -F
    if rho == 0.0:
        return atoms, 0.0

    C = cost_to_atoms(cost, atoms)
    w = atoms.weights
    dual, lam = solve_robust_dual(F, C, w, rho)

    M = F[None, :] + lam * C
    h = M.min(axis=1)
    scale = 1.0 + float(np.max(np.abs(F))) + lam * float(C.max())
    tied = M <= h[:, None] + TIE_ATOL * scale
    rows = np.arange(len(atoms))
    z_lo = np.argmin(np.where(tied, C, np.inf), axis=1)
    z_hi = np.argmax(np.where(tied, C, -np.inf), axis=1)
    theta = np.zeros(len(atoms))

    if lam > 0:
        need = rho - float(w @ C[rows, z_lo])
        for i in range(len(atoms)):
            if need <= 0:
                break
            extra = w[i] * (C[i, z_hi[i]] - C[i, z_lo[i]])
            if extra <= 0:
                continue
            take = min(extra, need)
            theta[i] = take / extra
            need -= take
        if need > BUDGET_ATOL:
            raise InternalError(f"worst-case recovery left {need:.3g} of the transport budget unused")

    mu = np.zeros(cost.n_points)
    np.add.at(mu, z_lo, w * (1.0 - theta))
    np.add.at(mu, z_hi, w * theta)
    plan_cost = float(w @ ((1.0 - theta) * C[rows, z_lo] + theta * C[rows, z_hi]))
    primal = float(mu @ F)
    if abs(primal - dual) > GAP_RTOL * (1.0 + abs(dual)) or plan_cost > rho + BUDGET_ATOL:
        raise InternalError(
            f"primal-dual mismatch in worst-case recovery: primal={primal:.12g}, dual={dual:.12g}, "
            f"plan cost={plan_cost:.12g}, rho={rho:.12g}"
        )
    return WeightedAtoms.from_dense(mu), plan_cost


def regularizer_value(f, atoms: WeightedAtoms, rho: float, cost: CostMetric) -> float:
    """Worst-case gain of the optimistic problem over the nominal mean."""
    F = _as_f(f, cost)
    value, _ = optimistic_inner(F, atoms, rho, cost)
    return value - atoms.mean(F)


def stay_line_slopes(f, atoms: WeightedAtoms, cost: CostMetric) -> np.ndarray:
    """Positive slopes (f(z_i) - f(z)) / c(z, z_i); their maximum bounds lambda*."""
    F = _as_f(f, cost)
    C = cost_to_atoms(cost, atoms)
    diff = F[atoms.points][:, None] - F[None, :]
    mask = (diff > 0) & (C > 0)
    return np.sort(diff[mask] / C[mask])
