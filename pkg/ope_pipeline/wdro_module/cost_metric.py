# ope_pipeline/wdro_module/cost_metric.py
"""
Ground metrics on the finite action / next-state space, with the point index
z = a * n_states + s'. The default metric is
c((a, s), (a', s')) = (|s - s'| + |a - a'|) / (|S| + |A|).
Custom metrics are dense symmetric tables validated on construction and
persisted as JSON Lines (header record, then one record per pair i < j).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from ope_pipeline.errors import DatasetFormatError, InputError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
METRIC_ATOL = 1e-12
EXHAUSTIVE_LIMIT = 64
TRIANGLE_SAMPLES = 20000


@dataclass(frozen=True)
class CostMetric:
    table: np.ndarray
    n_states: int
    n_actions: int
    kind: str = "custom"

    def __post_init__(self):
        C = np.array(self.table, dtype=float)
        n = self.n_states * self.n_actions
        if C.shape != (n, n):
            raise InputError(f"cost table must be {(n, n)} for {self.n_actions} actions x {self.n_states} states")
        _validate_metric(C)
        C.setflags(write=False)
        object.__setattr__(self, "table", C)

    @property
    def n_points(self) -> int:
        return self.table.shape[0]

    @property
    def diam(self) -> float:
        return float(self.table.max())

    def point(self, a: int, s_next: int) -> int:
        return a * self.n_states + s_next

    def unpoint(self, z: int):
        return divmod(int(z), self.n_states)

    def __call__(self, z1: int, z2: int) -> float:
        return float(self.table[z1, z2])

    @classmethod
    def normalized(cls, n_states: int, n_actions: int) -> "CostMetric":
        a, s = np.divmod(np.arange(n_states * n_actions), n_states)
        C = (np.abs(s[:, None] - s[None, :]) + np.abs(a[:, None] - a[None, :])) / (n_states + n_actions)
        return cls(C, n_states, n_actions, kind="normalized")

    @classmethod
    def from_table(cls, table, n_states: int, n_actions: int) -> "CostMetric":
        return cls(table, n_states, n_actions, kind="custom")


def _validate_metric(C: np.ndarray) -> None:
    if not np.all(np.isfinite(C)) or np.any(C < 0):
        raise InputError("cost entries must be finite and nonnegative")
    if np.any(np.abs(np.diag(C)) > METRIC_ATOL):
        raise InputError("cost must vanish on the diagonal")
    if np.any(np.abs(C - C.T) > METRIC_ATOL):
        raise InputError("cost table must be symmetric")
    off = ~np.eye(C.shape[0], dtype=bool)
    if np.any(C[off] <= 0):
        raise InputError("cost must be strictly positive between distinct points")

    n = C.shape[0]
    if n <= EXHAUSTIVE_LIMIT:
        gap = C[:, None, :] - (C[:, :, None] + C[None, :, :])
        worst = float(gap.max())
    else:
        rng = np.random.Generator(np.random.PCG64(0))
        i, j, k = rng.integers(0, n, size=(3, TRIANGLE_SAMPLES))
        worst = float(np.max(C[i, j] - C[i, k] - C[k, j]))
        logger.debug(f"[WDRO] triangle inequality sampled on {TRIANGLE_SAMPLES} triples")
    if worst > METRIC_ATOL:
        raise InputError(f"cost violates the triangle inequality by {worst:.3g}")


# -------------------------------------------------------------------
# Persistence
# -------------------------------------------------------------------
class CostHeader(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)

    kind: Literal["cost"]
    n_states: int
    n_actions: int


class CostRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)

    i: int
    j: int
    c: float


def save_cost(cost: CostMetric, path: PathLike) -> None:
    path = Path(path)
    lines = [json.dumps({"kind": "cost", "n_states": cost.n_states, "n_actions": cost.n_actions},
                        separators=(",", ":"))]
    n = cost.n_points
    for i in range(n):
        for j in range(i + 1, n):
            lines.append(json.dumps({"i": i, "j": j, "c": float(cost.table[i, j])}, separators=(",", ":")))
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot write cost table to {path}: {e}") from e


def load_cost(path: PathLike) -> CostMetric:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InputError(f"cannot read cost table {path}: {e}") from e
    if not raw:
        raise DatasetFormatError("missing cost header", line=1)
    try:
        header = CostHeader.model_validate_json(raw[0])
    except ValidationError as e:
        raise DatasetFormatError(f"bad cost header: {e.errors()[0]['msg']}", line=1) from e

    n = header.n_states * header.n_actions
    C = np.zeros((n, n))
    seen = np.eye(n, dtype=bool)
    for lineno, text in enumerate(raw[1:], start=2):
        if not text.strip():
            continue
        try:
            rec = CostRecord.model_validate_json(text)
        except ValidationError as e:
            raise DatasetFormatError(f"bad cost record: {e.errors()[0]['msg']}", line=lineno) from e
        if not 0 <= rec.i < rec.j < n:
            raise DatasetFormatError(f"pair ({rec.i}, {rec.j}) must satisfy 0 <= i < j < {n}", line=lineno)
        if seen[rec.i, rec.j]:
            raise DatasetFormatError(f"duplicate pair ({rec.i}, {rec.j})", line=lineno)
        C[rec.i, rec.j] = C[rec.j, rec.i] = rec.c
        seen[rec.i, rec.j] = seen[rec.j, rec.i] = True
    if not seen.all():
        i, j = np.argwhere(~seen)[0]
        raise DatasetFormatError(f"cost table is missing pair ({int(min(i, j))}, {int(max(i, j))})")
    return CostMetric.from_table(C, header.n_states, header.n_actions)
