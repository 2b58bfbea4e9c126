"""Scenario configurations and up-front validation of the parameter chain."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .chart_metric import MetricField
from .errors import ConfigError
from .scenarios import make_metric

SUITES = ("perturb", "intersections", "pipeline", "bumpy", "convexity")

DEFAULT_TOLERANCES = {
    "residual": 1e-4,
    "negative_control": 1e-2,
    "plateau": 1e-8,
    "length": 1e-6,
    "tails": 1e-12,
    "forbidden": 1e-9,
    "clearance_factor": 10.0,
    "convexity": 1e-6,
    "control": 1e-3,
    "determinant": 1e-5,
    "spectral": 1e-4,
    "detect_tol": 2e-3,
}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    metric: str
    dim: int
    metric_params: dict = field(default_factory=dict)
    eta: float = 0.5
    eps: float = 0.0714
    delta: float = 0.035
    s_budget: float = 4e-5
    offset_budget: Optional[float] = None
    base_point: Tuple[float, ...] = ()
    direction: Tuple[float, ...] = ()
    normal_seed: Tuple[float, ...] = ()
    length_bound: float = 3.0
    support_samples: int = 10000
    nodes: int = 400
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    seed: int = 0
    output_dir: str = "out"
    expect_bumpy: Optional[bool] = None

    def field(self) -> MetricField:
        return make_metric(self.metric, **self.metric_params)

    def tol(self, key: str) -> float:
        return float(self.tolerances.get(key, DEFAULT_TOLERANCES[key]))

    @property
    def budget(self) -> float:
        return self.delta if self.offset_budget is None else self.offset_budget

    def as_dict(self) -> dict:
        d = asdict(self)
        d["base_point"] = list(self.base_point)
        d["direction"] = list(self.direction)
        d["normal_seed"] = list(self.normal_seed)
        return d


SCENARIOS: Dict[str, ScenarioConfig] = {
    "euclidean-r3": ScenarioConfig(
        "euclidean-r3", "euclidean", 3, {"dim": 3}, 0.5, 0.0714, 0.035, 4e-5, None,
        (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), expect_bumpy=None,
    ),
    "torus-cross": ScenarioConfig(
        "torus-cross", "flat-torus", 3, {"periods": (2.0, 2.0, 2.0)}, 0.3, 0.04, 0.018, 4e-5, 0.018,
        (0.7, 1.1, 1.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), length_bound=3.0, expect_bumpy=False,
    ),
    "sphere-chart": ScenarioConfig(
        "sphere-chart", "sphere-chart", 2, {"radius": 1.0}, 0.5, 0.0714, 0.035, 4e-5, None,
        (np.pi / 2, 1.0), (0.0, 1.0), (1.0, 0.0), length_bound=7.0, expect_bumpy=False,
    ),
    "ellipsoid-113": ScenarioConfig(
        "ellipsoid-113", "ellipsoid-chart", 2, {"axes": (1.0, 1.1, 1.3), "polar_axis": 2}, 0.5, 0.0714, 0.035, 4e-5,
        None, (np.pi / 2, 0.7), (1.0, 0.3), (0.0, 1.0), length_bound=7.0, expect_bumpy=True,
    ),
    "poly-test": ScenarioConfig(
        "poly-test", "poly-test", 2, {"dim": 2, "c2": 1.0, "c4": 0.0}, 0.5, 0.0714, 0.035, 4e-5, None,
        (0.0, 0.0), (1.0, 0.0), (0.0, 1.0),
    ),
}


def validate(cfg: ScenarioConfig, field: Optional[MetricField] = None) -> MetricField:
    """Check ``2 delta < eps``, ``7 eps < eta`` and ``eta < inj/3``; return the metric field."""
    for name in ("eta", "eps", "delta", "s_budget"):
        v = getattr(cfg, name)
        if not (isinstance(v, (int, float)) and np.isfinite(v) and v > 0):
            raise ConfigError(f"{name} must be a positive number, got {v!r}", field=name)
    if not 2 * cfg.delta < cfg.eps:
        raise ConfigError(f"bound violated: 2*delta < eps ({2 * cfg.delta:g} >= {cfg.eps:g})", field="delta")
    if not 7 * cfg.eps < cfg.eta:
        raise ConfigError(f"bound violated: 7*eps < eta ({7 * cfg.eps:g} >= {cfg.eta:g})", field="eps")
    try:
        field = cfg.field() if field is None else field
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad metric description: {exc}", field="metric") from None
    if not cfg.eta < field.inj / 3:
        raise ConfigError(f"bound violated: eta < inj/3 ({cfg.eta:g} >= {field.inj / 3:g})", field="eta")
    if field.dim != cfg.dim:
        raise ConfigError(f"dim {cfg.dim} does not match the metric dimension {field.dim}", field="dim")
    if cfg.offset_budget is not None and not 0 < cfg.offset_budget <= cfg.delta:
        raise ConfigError("offset_budget must lie in (0, delta]", field="offset_budget")
    unknown = set(cfg.tolerances) - set(DEFAULT_TOLERANCES)
    if unknown:
        raise ConfigError(f"unknown tolerance keys {sorted(unknown)}", field="tolerances")
    return field


_TUPLE_FIELDS = ("base_point", "direction", "normal_seed")


def load_config(path=None, scenario: Optional[str] = None, overrides: Optional[dict] = None) -> ScenarioConfig:
    """Scenario defaults, then the JSON document at ``path``, then ``overrides``."""
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}", field=None) from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    name = scenario or doc.get("scenario") or "euclidean-r3"
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; known: {sorted(SCENARIOS)}", field="scenario")
    cfg = SCENARIOS[name]
    merged = dict(doc)
    merged.update(overrides or {})
    merged.pop("scenario", None)
    known = set(ScenarioConfig.__dataclass_fields__)
    bad = set(merged) - known
    if bad:
        raise ConfigError(f"unknown config fields {sorted(bad)}", field=sorted(bad)[0])
    if "tolerances" in merged:
        tol = dict(cfg.tolerances)
        if not isinstance(merged["tolerances"], dict):
            raise ConfigError("tolerances must be an object", field="tolerances")
        tol.update(merged["tolerances"])
        merged["tolerances"] = tol
    for key in _TUPLE_FIELDS:
        if key in merged:
            merged[key] = tuple(float(v) for v in merged[key])
    if "metric_params" in merged:
        mp = dict(cfg.metric_params)
        mp.update(merged["metric_params"])
        merged["metric_params"] = mp
    try:
        return replace(cfg, scenario=name, **merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
