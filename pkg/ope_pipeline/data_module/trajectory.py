# ope_pipeline/data_module/trajectory.py
"""
Seeded simulation of logged trajectories under a behavior policy and
line-oriented persistence of the resulting datasets.

Random numbers: numpy PCG64 driven by SeedSequence. Trajectory j of a
dataset draws its own 1 + 2T uniforms from SeedSequence(seed).spawn(J)[j]
(initial state, then action / next state per step). Every categorical draw
uses one uniform and the inverse CDF over ascending indices, so datasets are
byte-stable across platforms.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, List, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from ope_pipeline.errors import DatasetFormatError, InputError
from ope_pipeline.mdp_model.mdp_core import FiniteMdp, Policy

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
ROLLOUT_CHUNK = 4096


# -------------------------------------------------------------------
# Domain types
# -------------------------------------------------------------------
@dataclass(frozen=True)
class DatasetMeta:
    env: str
    seed: Optional[int]
    J: int
    T: int
    n_states: int
    n_actions: int


class Trajectory(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    """Transitions stored column-wise, ordered by (traj, t)."""

    traj: np.ndarray
    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    meta: DatasetMeta

    def __post_init__(self):
        cols = {}
        for name in ("traj", "t", "s", "a", "s_next"):
            cols[name] = np.asarray(getattr(self, name), dtype=np.int64)
        cols["r"] = np.asarray(self.r, dtype=float)
        n = cols["s"].shape[0]
        if any(c.shape != (n,) for c in cols.values()):
            raise InputError("dataset columns must be 1-D and of equal length")
        S, A = self.meta.n_states, self.meta.n_actions
        for name, hi in (("s", S), ("s_next", S), ("a", A)):
            c = cols[name]
            if n and (c.min() < 0 or c.max() >= hi):
                raise InputError(f"column '{name}' has indices outside [0, {hi})")
        if n > 1:
            same = cols["traj"][1:] == cols["traj"][:-1]
            if np.any(cols["traj"][1:] < cols["traj"][:-1]):
                raise InputError("transitions must be ordered by trajectory")
            if np.any(same & (cols["t"][1:] != cols["t"][:-1] + 1)):
                raise InputError("time steps within a trajectory must be consecutive")
            broken = np.flatnonzero(same & (cols["s"][1:] != cols["s_next"][:-1]))
            if broken.size:
                raise InputError(f"trajectory chain broken after transition {int(broken[0])}")
        for name, c in cols.items():
            c.setflags(write=False)
            object.__setattr__(self, name, c)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.meta == other.meta and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("traj", "t", "s", "a", "r", "s_next")
        )

    @property
    def n_transitions(self) -> int:
        return int(self.s.shape[0])

    def trajectories(self) -> Iterator[Trajectory]:
        if not self.n_transitions:
            return
        bounds = np.flatnonzero(np.diff(self.traj)) + 1
        for idx in np.split(np.arange(self.n_transitions), bounds):
            yield Trajectory(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx])

    @classmethod
    def empty(cls, env: str, n_states: int, n_actions: int, seed: Optional[int] = None) -> "Dataset":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, np.zeros(0), z, DatasetMeta(env, seed, 0, 0, n_states, n_actions))


# -------------------------------------------------------------------
# Simulation
# -------------------------------------------------------------------
def _cdf(probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Cumulative rows plus the last index with positive mass per row."""
    cdf = np.cumsum(probs, axis=-1)
    positive = probs > 0
    last = probs.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    return cdf, last


def _inverse_cdf(cdf_rows: np.ndarray, last_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.sum(cdf_rows <= u[:, None], axis=1)
    return np.minimum(idx, last_rows)


def _uniforms(seed: int, count: int, horizon: int) -> np.ndarray:
    children = np.random.SeedSequence(seed).spawn(count)
    return np.stack([np.random.Generator(np.random.PCG64(c)).random(1 + 2 * horizon) for c in children])


def _roll(mdp: FiniteMdp, policy: Policy, u: np.ndarray, horizon: int):
    d0_cdf, d0_last = _cdf(mdp.initial_dist)
    pi_cdf, pi_last = _cdf(policy.probs)
    p_cdf, p_last = _cdf(mdp.transitions)
    n = u.shape[0]
    S = np.empty((n, horizon), dtype=np.int64)
    A = np.empty((n, horizon), dtype=np.int64)
    S_next = np.empty((n, horizon), dtype=np.int64)
    s = _inverse_cdf(np.broadcast_to(d0_cdf, (n, d0_cdf.size)), np.full(n, d0_last), u[:, 0])
    for t in range(horizon):
        a = _inverse_cdf(pi_cdf[s], pi_last[s], u[:, 1 + 2 * t])
        s2 = _inverse_cdf(p_cdf[s, a], p_last[s, a], u[:, 2 + 2 * t])
        S[:, t], A[:, t], S_next[:, t] = s, a, s2
        s = s2
    return S, A, mdp.rewards[S, A], S_next


def simulate(
    mdp: FiniteMdp,
    behavior: Policy,
    episodes: int,
    horizon: int,
    seed: int,
    env: Optional[str] = None,
) -> Dataset:
    """J independent length-T trajectories under `behavior`, rewards r(s_t, a_t)."""
    if episodes < 1 or horizon < 1:
        raise InputError("episodes and horizon must both be at least 1")
    if behavior.probs.shape != (mdp.n_states, mdp.n_actions):
        raise InputError("behavior policy does not match the MDP dimensions")
    u = _uniforms(seed, episodes, horizon)
    S, A, R, S_next = _roll(mdp, behavior, u, horizon)
    traj = np.repeat(np.arange(episodes), horizon)
    t = np.tile(np.arange(horizon), episodes)
    meta = DatasetMeta(env or mdp.name, int(seed), episodes, horizon, mdp.n_states, mdp.n_actions)
    logger.debug(f"[SIM] {meta.env}: J={episodes} T={horizon} seed={seed}")
    return Dataset(traj, t, S.ravel(), A.ravel(), R.ravel(), S_next.ravel(), meta)


def rollout_value(
    mdp: FiniteMdp, policy: Policy, episodes: int, horizon: int, seed: int
) -> Tuple[float, float]:
    """Monte Carlo estimate of (1 - gamma) E[sum_t gamma^t r_t] and its standard error."""
    if episodes < 2 or horizon < 1:
        raise InputError("need at least 2 episodes and horizon >= 1")
    disc = (1.0 - mdp.discount) * mdp.discount ** np.arange(horizon)
    children = np.random.SeedSequence(seed).spawn(episodes)
    returns: List[np.ndarray] = []
    for start in range(0, episodes, ROLLOUT_CHUNK):
        block = children[start:start + ROLLOUT_CHUNK]
        u = np.stack([np.random.Generator(np.random.PCG64(c)).random(1 + 2 * horizon) for c in block])
        _, _, R, _ = _roll(mdp, policy, u, horizon)
        returns.append(R @ disc)
    g = np.concatenate(returns)
    return float(g.mean()), float(g.std(ddof=1) / np.sqrt(g.size))


# -------------------------------------------------------------------
# Persistence (JSON Lines)
# -------------------------------------------------------------------
class DatasetHeader(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)

    kind: Literal["header"]
    env: str
    seed: Optional[int]
    J: int
    T: int
    n_states: int
    n_actions: int


class TransitionRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)

    traj: int
    t: int
    s: int
    a: int
    r: float
    s_next: int


def _dumps(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save_dataset(ds: Dataset, path: PathLike) -> None:
    path = Path(path)
    lines = [_dumps({"kind": "header", **asdict(ds.meta)})]
    for k in range(ds.n_transitions):
        lines.append(_dumps({
            "traj": int(ds.traj[k]),
            "t": int(ds.t[k]),
            "s": int(ds.s[k]),
            "a": int(ds.a[k]),
            "r": float(ds.r[k]),
            "s_next": int(ds.s_next[k]),
        }))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot write dataset to {path}: {e}") from e
    logger.info(f"[SIM] saved {ds.n_transitions} transitions to {path}")


def load_dataset(path: PathLike) -> Dataset:
    path = Path(path)
    try:
        raw_lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InputError(f"cannot read dataset {path}: {e}") from e
    if not raw_lines:
        raise DatasetFormatError("missing header record", line=1)
    try:
        header = DatasetHeader.model_validate_json(raw_lines[0])
    except ValidationError as e:
        raise DatasetFormatError(f"bad header: {e.errors()[0]['msg']}", line=1) from e

    rows = []
    for lineno, text in enumerate(raw_lines[1:], start=2):
        if not text.strip():
            continue
        try:
            rec = TransitionRecord.model_validate_json(text)
        except ValidationError as e:
            raise DatasetFormatError(f"bad transition record: {e.errors()[0]['msg']}", line=lineno) from e
        if not (0 <= rec.s < header.n_states and 0 <= rec.s_next < header.n_states):
            raise DatasetFormatError("state index out of declared range", line=lineno)
        if not 0 <= rec.a < header.n_actions:
            raise DatasetFormatError("action index out of declared range", line=lineno)
        if rows:
            prev = rows[-1]
            if rec.traj == prev[0] and (rec.t != prev[1] + 1 or rec.s != prev[5]):
                raise DatasetFormatError("record does not continue its trajectory", line=lineno)
            if rec.traj < prev[0]:
                raise DatasetFormatError("records are not ordered by trajectory", line=lineno)
        rows.append((rec.traj, rec.t, rec.s, rec.a, rec.r, rec.s_next))

    meta = DatasetMeta(header.env, header.seed, header.J, header.T, header.n_states, header.n_actions)
    n_traj = len({r[0] for r in rows})
    if n_traj != header.J:
        raise DatasetFormatError(f"header declares J={header.J} but file holds {n_traj} trajectories")
    if not rows:
        return Dataset.empty(meta.env, meta.n_states, meta.n_actions, meta.seed)
    cols = list(zip(*rows))
    return Dataset(
        np.array(cols[0]), np.array(cols[1]), np.array(cols[2]), np.array(cols[3]),
        np.array(cols[4], dtype=float), np.array(cols[5]), meta,
    )
