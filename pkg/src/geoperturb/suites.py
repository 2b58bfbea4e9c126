"""Verification suites run by the command line harness."""

from __future__ import annotations

import itertools
from typing import Callable, Dict

import numpy as np

from .bump_perturb import length_under, make_family, parallel_convexity_check
from .chart_metric import CurveDiscrete, MetricField, finsler_fundamental_tensor, riemannian_square
from .closed_geo import (
    AuditTarget,
    bumpy_audit,
    ellipsoid_targets,
    crossing_removal_pipeline,
    torus_cross_loops,
    torus_targets,
)
from .config import ScenarioConfig
from .errors import ConfigError, GeoPerturbError
from .geodesic_flow import geodesic_residual, make_segment
from .intersect import (
    disentangle,
    double_points,
    forbidden_offset_line_oracle,
    pairwise_intersections,
)
from .scenarios import euclidean
from .report import Report
from .tubular import build_tubular_chart, in_U


def _unit(field: MetricField, p, v):
    v = np.asarray(v, dtype=float)
    return v / np.sqrt(v @ field.g(p) @ v)


def scenario_chart(cfg: ScenarioConfig, field: MetricField):
    p = np.asarray(cfg.base_point, dtype=float)
    g = field.g(p)
    v = _unit(field, p, cfg.direction)
    w = np.asarray(cfg.normal_seed, dtype=float)
    w = w - (w @ g @ v) * v
    w = _unit(field, p, w)
    return build_tubular_chart(field, p, v, w, cfg.eta, cfg.eps)


def support_samples(chart, count: int, rng: np.random.Generator, extra_charts=()) -> np.ndarray:
    """Points outside every U set: half drawn in tube coordinates, half in a chart box."""
    eta, eps, n = chart.eta, chart.eps, chart.dim
    dom = chart.field.domain
    out = []
    have = 0
    reach = eta + 8 * eps
    while have < count:
        k = count
        t = rng.uniform(-reach, reach, k)
        y = rng.normal(size=(k, n - 1))
        y *= (rng.uniform(0, 2 * eps, k) / np.linalg.norm(y, axis=1))[:, None]
        a = chart.forward(t, y)
        b = chart.p + rng.uniform(-reach, reach, (k, n))
        pts = np.vstack([a, b])
        pts = pts[dom.contains(pts, 1e-6)]
        keep = ~in_U(chart, pts)
        for c in extra_charts:
            keep &= ~in_U(c, pts)
        pts = pts[keep]
        out.append(pts)
        have += len(pts)
    return np.vstack(out)[:count]


# --------------------------------------------------------------------------
# perturb


def suite_perturb(cfg: ScenarioConfig, field: MetricField, rep: Report) -> None:
    rng = np.random.default_rng(cfg.seed)
    chart = scenario_chart(cfg, field)
    fam = make_family(chart, cfg.delta, s_max=cfg.s_budget, finsler=riemannian_square(field), nodes=cfg.nodes)
    smax = fam.s_max
    rep.details["s_max"] = smax
    pts = support_samples(chart, cfg.support_samples, rng)
    g0 = field.g(pts)
    worst = 0.0
    for frac in (0.25, 0.5, 1.0):
        worst = max(worst, float(np.max(np.abs(fam.metric_at(frac * smax, pts) - g0))))
    rep.check("support_exact", worst, 0.0, "==")

    seg = fam.displaced(smax)
    base = fam.base_curve()
    rep.check("displaced_residual", seg.residual_max, cfg.tol("residual"), "<=")
    rep.check("negative_control_residual", geodesic_residual(field, seg.curve), cfg.tol("negative_control"), ">")
    L1 = length_under(fam.metric_field(smax), seg.nodes, seg.params)
    L0 = length_under(field, base.nodes, base.params)
    rep.check("length_preserved", abs(L1 - L0), cfg.tol("length"), "<=")
    tails = np.abs(seg.params) >= cfg.eta + 4 * cfg.eps
    rep.check("tails_unchanged", float(np.max(np.abs(seg.nodes[tails] - base.nodes[tails]))), cfg.tol("tails"), "<=")

    cut = fam.cutoffs
    plateau = np.linspace(-cfg.eta - 2 * cfg.eps, cfg.eta + 2 * cfg.eps, 1001)
    rep.check("profile_plateau", float(np.max(np.abs(cut.profile(smax, plateau) - smax))), cfg.tol("plateau"), "<=")
    ts = np.linspace(-2 * cfg.eta, 2 * cfg.eta, 1000)
    viol = int(np.sum(cut.profile_deriv(smax, ts) * ts > 0))
    rep.check("profile_monotone_violations", viol, 0, "==")

    # Finsler layer on the Riemannian square
    xs = pts[rng.choice(len(pts), 100, replace=False)]
    vs = rng.normal(size=xs.shape)
    G = finsler_fundamental_tensor(fam.finsler, xs, vs)
    rep.check("fundamental_tensor_vs_g", float(np.max(np.abs(G - field.g(xs)))), 1e-8, "<=")
    inside = fam.chart.forward(
        rng.uniform(cfg.eta, cfg.eta + 6 * cfg.eps, 100) * rng.choice([-1, 1], 100),
        rng.normal(scale=0.3 * cfg.eps, size=(100, field.dim - 1)),
    )
    fv = fam.finsler_at(smax, inside, vs)
    fr = fam.finsler_at(smax, inside, -vs)
    rep.check("finsler_reversible", float(np.max(np.abs(fv - fr))), 1e-12, "<=")
    gs = fam.metric_at(smax, inside)
    quad = np.sqrt(np.einsum("...i,...ij,...j->...", vs, gs, vs))
    rep.check("finsler_matches_metric", float(np.max(np.abs(fv - quad))), 1e-10, "<=")

    rep.table("profile", ["t", "u_s"], [ts, cut.profile(smax, ts)])
    rep.table("displaced_trace", ["t"] + [f"x_{i + 1}" for i in range(field.dim)], [seg.params] + list(seg.nodes.T))
    tt = np.linspace(-2 * cfg.eta, 2 * cfg.eta, 401)
    for r in (0.0, 0.5 * cfg.eps):
        y = np.zeros((tt.size, field.dim - 1))
        y[:, 0] = r
        rep.table(f"alpha_slice_r{r:.4f}", ["t", "alpha"], [tt, cut.alpha(tt, y)])


# --------------------------------------------------------------------------
# intersections


def _axes_segments(field: MetricField, p, count: int):
    segs = []
    t = np.linspace(-1.0, 1.0, 201)
    for j in range(count):
        e = np.zeros(field.dim)
        e[j] = 1.0
        segs.append(make_segment(field, p + np.outer(t, e), t, initial=(p.copy(), e)))
    return segs


def random_closed_curves(count: int, rng: np.random.Generator, spacing: float = 0.004, dim: int = 2):
    """Random trigonometric loops resampled to unit speed; planar ones cross themselves generically."""
    curves = []
    for _ in range(count):
        coef = [(rng.normal(size=dim) / k, rng.normal(size=dim) / k) for k in range(1, 4)]

        def trace(u):
            return sum(np.outer(np.cos(k * u), a) + np.outer(np.sin(k * u), b) for k, (a, b) in enumerate(coef, 1))

        fine = np.linspace(0, 2 * np.pi, 200001)
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(trace(fine), axis=0), axis=1))])
        nodes = int(np.ceil(cum[-1] / spacing))
        s = np.linspace(0, cum[-1], nodes + 1)
        u = np.interp(s, cum, fine)
        X = trace(u)
        X[-1] = X[0]
        curves.append(CurveDiscrete(X, s, closed=True))
    return curves


def _event_key(rep):
    return [(round(e.param_a, 6), round(e.param_b, 6)) for e in rep.events]


def detection_equivalence(field: MetricField, curves, tol: float):
    """Per curve: hash and brute force give the same events, counts stable under tol/2."""
    same, stable, total = 0, 0, 0
    for c in curves:
        h = double_points(c, field, tol)
        b = double_points(c, field, tol, brute=True)
        h2 = double_points(c, field, tol / 2)
        same += _event_key(h) == _event_key(b)
        stable += h.count == h2.count
        total += h.count
    return same, stable, total


def suite_intersections(cfg: ScenarioConfig, field: MetricField, rep: Report) -> None:
    if field.dim < 3:
        raise ConfigError("the intersections suite needs a three dimensional scenario", field="scenario")
    rng = np.random.default_rng(cfg.seed)
    p = np.asarray(cfg.base_point, dtype=float)
    segs = _axes_segments(field, p, 3)
    res = disentangle(field, p, segs, cfg.eta, cfg.eps, cfg.budget, delta=cfg.delta)
    spacing = max(s.curve.spacing for s in res.segments)
    rep.details["disentangle"] = res.as_dict()
    rep.check("clearance_over_spacing", res.clearance / spacing, cfg.tol("clearance_factor"), ">")
    events = 0
    for a, b in itertools.combinations(range(3), 2):
        events += pairwise_intersections(res.segments[a].curve, res.segments[b].curve, field, 2 * spacing).count
    rep.check("post_events", events, 0, "==")
    worst = 0.0
    for j, k in itertools.permutations(range(3), 2):
        cj, ck = res.families[j].chart, res.families[k].chart
        o = forbidden_offset_line_oracle(p, cj.v, cj.w, ck.v, ck.w, float(res.offsets[j]))
        worst = max(worst, abs(o.s_star - res.forbidden[j, k]))
    rep.check("forbidden_vs_line_oracle", worst, cfg.tol("forbidden"), "<=")
    charts = [f.chart for f in res.families]
    pts = support_samples(charts[0], cfg.support_samples, rng, charts[1:])
    rep.check("support_exact", float(np.max(np.abs(res.metric.g(pts) - field.g(pts)))), 0.0, "==")
    tails = 0.0
    for fam, seg, orig in zip(res.families, res.segments, res.originals):
        m = np.abs(seg.params) >= fam.chart.eta + 4 * fam.chart.eps
        tails = max(tails, float(np.max(np.abs(seg.nodes[m] - orig.nodes[m]))))
    rep.check("tails_unchanged", tails, cfg.tol("tails"), "<=")

    plane = euclidean(2, 8.0)
    curves = random_closed_curves(20, rng)
    same, stable, total = detection_equivalence(plane, curves, 0.02)
    rep.details["random_curve_events"] = total
    rep.check("hash_matches_brute", same, 20, "==")
    rep.check("tolerance_halving_stable", stable, 20, "==")

    scales = np.array([0.25, 0.5, 1.0])
    clear = []
    for sc in scales:
        clear.append(disentangle(field, p, segs, cfg.eta, cfg.eps, sc * cfg.budget, delta=cfg.delta).clearance)
    rep.table("clearance_vs_s", ["s_budget", "clearance"], [scales * cfg.budget, clear])
    for j, seg in enumerate(res.segments):
        rep.table(f"segment_{j}", ["t"] + [f"x_{i + 1}" for i in range(field.dim)], [seg.params] + list(seg.nodes.T))


# --------------------------------------------------------------------------
# pipeline


def suite_pipeline(cfg: ScenarioConfig, field: MetricField, rep: Report) -> None:
    if cfg.scenario != "torus-cross":
        raise ConfigError("the pipeline suite ships with the torus-cross scenario", field="scenario")
    rng = np.random.default_rng(cfg.seed)
    loops = torus_cross_loops(field)
    out = crossing_removal_pipeline(
        field, loops, cfg.length_bound, cfg.eta, cfg.eps, cfg.budget, delta=cfg.delta, tol=cfg.tol("detect_tol")
    )
    rep.details["pipeline"] = out.as_dict()
    rep.check("events_before", out.before_events, 1, ">=")
    rep.check("events_after", out.after_events, 0, "==")
    rep.check("length_change", out.max_length_change, cfg.tol("length"), "<=")
    pts = _outside_balls(field, [c.point for c in out.crossings], 2 * out.eta, cfg.support_samples, rng)
    rep.check("support_exact", float(np.max(np.abs(out.metric.g(pts) - field.g(pts)))), 0.0, "==")
    for i, c in enumerate(out.loops_after):
        rep.table(f"loop_{i}_after", ["t"] + [f"x_{k + 1}" for k in range(field.dim)], [c.params] + list(c.nodes.T))


def _outside_balls(field, centers, radius, count, rng):
    dom = field.domain
    out, have = [], 0
    while have < count:
        pts = dom.lower + rng.random((count, field.dim)) * (dom.upper - dom.lower)
        keep = np.ones(len(pts), dtype=bool)
        for c in centers:
            keep &= np.linalg.norm(dom.displacement(c, pts), axis=-1) >= radius
        out.append(pts[keep])
        have += int(np.sum(keep))
    return np.vstack(out)[:count]


# --------------------------------------------------------------------------
# bumpy


def audit_targets(cfg: ScenarioConfig, field: MetricField):
    if cfg.metric == "flat-torus":
        return torus_targets(field, cfg.length_bound)
    if cfg.metric == "sphere-chart":
        return [AuditTarget(field, (0, 1), [np.array([np.pi / 2 + 0.02, 0.1])], "great-circle")]
    if cfg.metric == "ellipsoid-chart":
        return ellipsoid_targets(cfg.metric_params.get("axes", (1.0, 1.1, 1.3)))
    raise ConfigError(f"no closed-geodesic seeds for scenario {cfg.scenario!r}", field="scenario")


def suite_bumpy(cfg: ScenarioConfig, field: MetricField, rep: Report) -> None:
    audit = bumpy_audit(audit_targets(cfg, field), cfg.length_bound, seed=cfg.seed)
    rep.details["audit"] = audit.as_dict()
    rep.check("classes_found", audit.class_count, 1, ">=")
    det = max((abs(np.prod(e.eigenvalues).real - 1) for e in audit.classes), default=0.0)
    rep.check("monodromy_determinant", det, cfg.tol("determinant"), "<=")
    sym = 0.0
    for e in audit.classes:
        ev = e.eigenvalues
        for lam in ev:
            sym = max(sym, float(np.min(np.abs(ev - 1 / np.conj(lam)))))
    rep.check("spectral_symmetry", sym, cfg.tol("spectral"), "<=")
    if cfg.expect_bumpy is not None:
        rep.check("bumpy_matches_expectation", float(audit.bumpy == cfg.expect_bumpy), 1.0, "==")
    for i, e in enumerate(audit.classes):
        c = e.loop.curve
        rep.table(f"trace_{i:03d}", ["t"] + [f"x_{k + 1}" for k in range(field.dim)], [c.params] + list(c.nodes.T))


# --------------------------------------------------------------------------
# convexity


def convexity_pair(cross: float = 0.0):
    """``g0`` Euclidean and ``g1 = dt^2 + (1 + t^2) dx^2`` (plus ``cross * t`` off-diagonal)."""

    def g0(x):
        return np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2)).copy()

    def g1(x):
        x = np.asarray(x, dtype=float)
        t = x[..., 0]
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = 1.0
        g[..., 1, 1] = 1.0 + t**2
        g[..., 0, 1] = g[..., 1, 0] = cross * t
        return g

    def alpha(x):
        x = np.asarray(x, dtype=float)
        return 0.5 + 0.4 * np.sin(1.3 * x[..., 0]) * np.cos(0.7 * x[..., 1])

    return g0, g1, alpha


def suite_convexity(cfg: ScenarioConfig, field: MetricField, rep: Report) -> None:
    grid = (np.linspace(-1, 1, 41), np.linspace(-1, 1, 21)[:, None])
    g0, g1, alpha = convexity_pair()
    ok = parallel_convexity_check(g0, g1, alpha, grid, tol=cfg.tol("convexity"))
    rep.check("t_line_residual", ok.residual, cfg.tol("convexity"), "<=")
    g0, g1c, alpha = convexity_pair(0.1)
    bad = parallel_convexity_check(g0, g1c, alpha, grid, tol=cfg.tol("convexity"), strict=False)
    rep.check("control_residual", bad.residual, cfg.tol("control"), ">")
    rep.check("control_flagged", float(not bad.passed and not bad.parallel_form), 1.0, "==")


SUITE_FUNCS: Dict[str, Callable] = {
    "perturb": suite_perturb,
    "intersections": suite_intersections,
    "pipeline": suite_pipeline,
    "bumpy": suite_bumpy,
    "convexity": suite_convexity,
}


def run_suite(suite: str, cfg: ScenarioConfig, field: MetricField) -> Report:
    rep = Report(suite, cfg.scenario, cfg.as_dict())
    try:
        SUITE_FUNCS[suite](cfg, field, rep)
    except ConfigError:
        raise
    except GeoPerturbError as exc:
        rep.details["error"] = f"{type(exc).__name__}: {exc}"
        rep.check("suite_completed", 0.0, 1.0, "==")
    return rep
