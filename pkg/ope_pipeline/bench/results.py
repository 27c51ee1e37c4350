# ope_pipeline/bench/results.py
"""Result tables written as CSV plus a JSON sidecar with the run metadata."""

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from ope_pipeline import __version__
from ope_pipeline.errors import InputError, OpeError
from ope_pipeline.mdp_model.environments import CONVENTION_FLAGS

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
STATUS_COLUMNS = ("status", "error")


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ResultTable:
    experiment: str
    key: Sequence[str]
    columns: Sequence[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def all_columns(self) -> List[str]:
        return list(self.key) + list(self.columns) + list(STATUS_COLUMNS)

    def add(self, keys: Dict[str, Any], values: Dict[str, Any]) -> None:
        missing = [c for c in self.columns if c not in values]
        if missing or set(keys) != set(self.key):
            raise InputError(f"row for {self.experiment} is missing columns {missing or list(self.key)}")
        self.rows.append({**keys, **values, "status": "ok", "error": None})

    def add_failure(self, keys: Dict[str, Any], error: OpeError) -> None:
        row = {c: None for c in self.columns}
        row.update(keys)
        row.update({"status": "error", "error": f"{type(error).__name__}: {error}"})
        self.rows.append(row)
        logger.warning(f"[BENCH] {self.experiment} row {keys} failed: {error}")

    def sorted_rows(self) -> List[Dict[str, Any]]:
        return sorted(self.rows, key=lambda r: tuple(r[k] for k in self.key))

    def ok_rows(self) -> List[Dict[str, Any]]:
        return [r for r in self.sorted_rows() if r["status"] == "ok"]

    def column(self, name: str) -> List[Any]:
        return [r[name] for r in self.ok_rows()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.all_columns)
        for row in self.sorted_rows():
            writer.writerow([_cell(row.get(c)) for c in self.all_columns])
        return buf.getvalue()

    def meta_record(self) -> Dict[str, Any]:
        return {
            "experiment": self.experiment,
            "version": __version__,
            "conventions": CONVENTION_FLAGS,
            **self.meta,
        }

    def write(self, path: PathLike) -> Path:
        """Write <path> (CSV) and <stem>.meta.json next to it."""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_csv(), encoding="utf-8")
            sidecar = path.with_name(path.stem + ".meta.json")
            sidecar.write_text(json.dumps(self.meta_record(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            raise InputError(f"cannot write results to {path}: {e}") from e
        logger.info(f"[BENCH] wrote {len(self.rows)} rows to {path}")
        return path


def default_output(experiment: str, out: Optional[PathLike], results_dir: PathLike) -> Path:
    return Path(out) if out is not None else Path(results_dir) / f"{experiment}.csv"
