"""Suite reports: PASS/FAIL checks, deterministic JSON, plot-ready CSV tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Check:
    """One invariant: ``value`` compared against ``tolerance`` with ``relation``."""

    name: str
    value: float
    tolerance: float
    relation: str  # "<=", "<", ">=", ">", "=="

    @property
    def passed(self) -> bool:
        v, t = self.value, self.tolerance
        if isinstance(v, float) and math.isnan(v):
            return False
        return {
            "<=": v <= t,
            "<": v < t,
            ">=": v >= t,
            ">": v > t,
            "==": v == t,
        }[self.relation]

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "status": "PASS" if self.passed else "FAIL",
            "value": self.value,
            "relation": self.relation,
            "tolerance": self.tolerance,
        }


@dataclass
class Report:
    suite: str
    scenario: str
    config: dict = field(default_factory=dict)
    checks: List[Check] = field(default_factory=list)
    details: dict = field(default_factory=dict)
    tables: Dict[str, Tuple[Sequence[str], np.ndarray]] = field(default_factory=dict)

    def check(self, name: str, value, tolerance, relation: str) -> Check:
        c = Check(name, float(value), float(tolerance), relation)
        self.checks.append(c)
        return c

    def table(self, name: str, header: Sequence[str], columns: Sequence) -> None:
        cols = [np.asarray(c, dtype=float).ravel() for c in columns]
        self.tables[name] = (list(header), np.column_stack(cols))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "suite": self.suite,
            "scenario": self.scenario,
            "status": "PASS" if self.passed else "FAIL",
            "config": self.config,
            "checks": [c.as_dict() for c in self.checks],
            "details": self.details,
        }

    def to_json(self) -> str:
        return dumps(self.as_dict()) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"report_{self.suite}.json"
        path.write_bytes(self.to_json().encode("utf-8"))
        return path


# --------------------------------------------------------------------------
# deterministic JSON


def _num(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    if x == int(x) and abs(x) < 1e16:
        return "%.1f" % x
    return "%.17g" % x


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with sorted keys and every float written with 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_string(str(k))}: {dumps(obj[k], indent, _level + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        items = [pad + dumps(v, indent, _level + 1) for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(float(obj))
    if isinstance(obj, Path):
        return _string(str(obj))
    return _string(str(obj))


def _string(s: str) -> str:
    import json

    return json.dumps(s, ensure_ascii=False)


# --------------------------------------------------------------------------
# CSV emission


def write_csv(path, header: Sequence[str], rows: np.ndarray) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in np.atleast_2d(rows):
            w.writerow(["%.17g" % float(v) for v in row])
    return path


def emit_plots(report: Optional[Report], out_dir) -> List[Path]:
    """Write every table of ``report`` as ``<suite>_<name>.csv``; no tables, no files."""
    if report is None or not report.tables:
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sorted(report.tables):
        header, rows = report.tables[name]
        paths.append(write_csv(out / f"{report.suite}_{name}.csv", header, rows))
    return paths
