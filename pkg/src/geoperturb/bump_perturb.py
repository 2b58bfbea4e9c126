"""Local metric perturbation that bends one geodesic segment sideways.

Inside a tubular chart ``(t, y)`` the flow ``Psi^s`` moves points in the
``y_1`` direction with speed ``psi(t, y)``.  The perturbed metric blends the
base metric with its pull-back under ``Psi^{-s}`` using the weight ``alpha``,
so the displaced curve ``Psi^s(c)`` becomes a geodesic of the blend while the
metric is untouched wherever ``alpha`` vanishes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .chart_metric import (
    ChartDomain,
    CurveDiscrete,
    FinslerField,
    MetricField,
    christoffel,
    curve_length,
)
from .errors import BoundViolation, FlowEscape, JacobianIllConditioned, NotParallelForm
from .geodesic_flow import GeodesicSegment, make_segment
from .tubular import TubularChart

FLOW_SUBSTEPS = 50
PULLBACK_STEP = 1e-6
CHART_JAC_STEP = 1e-5


# --------------------------------------------------------------------------
# mollifier


def _sigma(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    # 1/x overflows for subnormal x; exp(-inf) = 0 is the right value
    with np.errstate(over="ignore"):
        out[pos] = np.exp(-1.0 / x[pos])
    return out


def smoothstep(x) -> np.ndarray:
    """``S(x) = sigma(x) / (sigma(x) + sigma(1 - x))``: 0 for x <= 0, 1 for x >= 1."""
    x = np.asarray(x, dtype=float)
    a, b = _sigma(x), _sigma(1.0 - x)
    return a / (a + b)


def smoothstep_deriv(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    m = (x > 0) & (x < 1)
    xm = x[m]
    a, b = np.exp(-1.0 / xm), np.exp(-1.0 / (1.0 - xm))
    da, db = a / xm**2, b / (1.0 - xm) ** 2
    out[m] = (da * b + a * db) / (a + b) ** 2
    return out


@dataclass(frozen=True)
class CutoffSpec:
    theta: float
    eta: float
    eps: float
    delta: float

    def beta_theta(self, t) -> np.ndarray:
        return smoothstep((2 * self.theta - np.abs(t)) / self.theta)

    def beta_theta_deriv(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return -np.sign(t) / self.theta * smoothstep_deriv((2 * self.theta - np.abs(t)) / self.theta)

    def beta_eta_eps(self, t) -> np.ndarray:
        a = np.abs(t)
        e = self.eps
        return smoothstep((a - self.eta) / e) * smoothstep((self.eta + 6 * e - a) / e)

    def beta_eta_eps_deriv(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        a = np.abs(t)
        e = self.eps
        u1, u2 = (a - self.eta) / e, (self.eta + 6 * e - a) / e
        d = (smoothstep_deriv(u1) * smoothstep(u2) - smoothstep(u1) * smoothstep_deriv(u2)) / e
        return np.sign(t) * d

    def psi_t(self, t) -> np.ndarray:
        """Axial factor of the flow speed; 1 for |t| <= eta + 2 eps, 0 beyond eta + 4 eps."""
        return smoothstep((self.eta + 4 * self.eps - np.abs(t)) / (2 * self.eps))

    def psi_t_deriv(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        u = (self.eta + 4 * self.eps - np.abs(t)) / (2 * self.eps)
        return -np.sign(t) / (2 * self.eps) * smoothstep_deriv(u)

    def psi_r(self, r) -> np.ndarray:
        """Radial factor; 1 for r <= delta, 0 for r >= 2 delta."""
        return smoothstep((2 * self.delta - np.asarray(r)) / self.delta)

    def psi_r_deriv(self, r) -> np.ndarray:
        return -smoothstep_deriv((2 * self.delta - np.asarray(r)) / self.delta) / self.delta

    def psi(self, t, y) -> np.ndarray:
        return self.psi_t(t) * self.psi_r(np.linalg.norm(y, axis=-1))

    def profile(self, s, t) -> np.ndarray:
        """Lateral offset of the displaced curve at axial parameter ``t``."""
        return s * self.psi_t(t)

    def profile_deriv(self, s, t) -> np.ndarray:
        return s * self.psi_t_deriv(t)

    def alpha(self, t, y) -> np.ndarray:
        return self.beta_theta(np.linalg.norm(y, axis=-1)) * self.beta_eta_eps(t)


def make_cutoffs(theta: float, eta: float, eps: float, delta: float) -> CutoffSpec:
    if not theta > 0:
        raise BoundViolation("theta must be positive")
    if not (eps > 0 and 7 * eps < eta):
        raise BoundViolation(f"need 0 < 7*eps < eta, got eps={eps}, eta={eta}")
    if not (delta > 0 and 2 * delta < eps):
        raise BoundViolation(f"need 0 < 2*delta < eps, got delta={delta}, eps={eps}")
    return CutoffSpec(float(theta), float(eta), float(eps), float(delta))


# --------------------------------------------------------------------------
# flow in tubular coordinates


def _flow_rhs(cut: CutoffSpec, t, y, Dy, Dt):
    """Speed of ``y_1`` and the derivative of that speed for the variational state."""
    r = np.linalg.norm(y, axis=-1)
    pt, pr = cut.psi_t(t), cut.psi_r(r)
    dpt, dpr = cut.psi_t_deriv(t), cut.psi_r_deriv(r)
    with np.errstate(invalid="ignore", divide="ignore"):
        grad_r = np.where(r[..., None] > 0, y / r[..., None], 0.0)
    grad_y = (pt * dpr)[..., None] * grad_r
    speed = pt * pr
    if Dy is None:
        return speed, None, None
    # Dy: d y / d y0 (m x m), Dt: d y / d t0 (m)
    dDy = np.einsum("...a,...ab->...b", grad_y, Dy)
    dDt = (pr * dpt) + np.einsum("...a,...a->...", grad_y, Dt)
    return speed, dDy, dDt


def tube_flow(cut: CutoffSpec, s: float, t, y, with_jacobian: bool = False, substeps: int = FLOW_SUBSTEPS):
    """Flow of ``psi(t, y) e_1`` for time ``s`` in tubular coordinates.

    Returns the moved ``y``; with ``with_jacobian`` also ``d y / d y0`` and
    ``d y / d t0``.  Points where ``psi = 0`` are returned bit-for-bit.
    """
    t = np.asarray(t, dtype=float)
    y = np.array(y, dtype=float)
    m = y.shape[-1]
    moving = cut.psi(t, y) != 0
    Dy = np.broadcast_to(np.eye(m), y.shape + (m,)).copy()
    Dt = np.zeros(y.shape)
    if s == 0 or not np.any(moving):
        return (y, Dy, Dt) if with_jacobian else y
    tm, ym = t[moving], y[moving]
    Dym, Dtm = Dy[moving], Dt[moving]
    h = s / substeps
    e1 = np.zeros(m)
    e1[0] = 1.0

    def rhs(yy, DY, DT):
        sp, dDy, dDt = _flow_rhs(cut, tm, yy, DY if with_jacobian else None, DT)
        vy = sp[..., None] * e1
        if not with_jacobian:
            return vy, None, None
        return vy, dDy[..., None, :] * e1[:, None], dDt[..., None] * e1

    for _ in range(substeps):
        k1 = rhs(ym, Dym, Dtm)
        if with_jacobian:
            k2 = rhs(ym + 0.5 * h * k1[0], Dym + 0.5 * h * k1[1], Dtm + 0.5 * h * k1[2])
            k3 = rhs(ym + 0.5 * h * k2[0], Dym + 0.5 * h * k2[1], Dtm + 0.5 * h * k2[2])
            k4 = rhs(ym + h * k3[0], Dym + h * k3[1], Dtm + h * k3[2])
            Dym = Dym + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            Dtm = Dtm + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        else:
            k2 = rhs(ym + 0.5 * h * k1[0], None, None)
            k3 = rhs(ym + 0.5 * h * k2[0], None, None)
            k4 = rhs(ym + h * k3[0], None, None)
        ym = ym + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    if np.any(np.linalg.norm(ym, axis=-1) >= cut.eps):
        raise FlowEscape("flow left the disc of radius eps")
    y[moving] = ym
    if not with_jacobian:
        return y
    Dy[moving] = Dym
    Dt[moving] = Dtm
    return y, Dy, Dt


# --------------------------------------------------------------------------
# the family


@dataclass(frozen=True, eq=False)
class PerturbationFamily:
    chart: TubularChart
    cutoffs: CutoffSpec
    s_max: float
    finsler: Optional[FinslerField] = None
    nodes: int = 401

    @property
    def field(self) -> MetricField:
        return self.chart.field

    @property
    def dim(self) -> int:
        return self.chart.dim

    # --- scalar fields -------------------------------------------------

    def alpha(self, x) -> np.ndarray:
        return self._coords(x)[2]

    def _coords(self, x):
        c = self.cutoffs
        # alpha vanishes unless eta < |t| < eta + 6 eps and |y| < 2 theta
        t, y, inside = self.chart.tube_coords(x, window=(c.eta, c.eta + 6 * c.eps, 2 * c.theta))
        with np.errstate(invalid="ignore"):
            a = np.where(inside, self.cutoffs.alpha(np.nan_to_num(t), np.nan_to_num(y)), 0.0)
        return t, y, a, inside

    def profile(self, s, t) -> np.ndarray:
        return self.cutoffs.profile(s, t)

    # --- flow ----------------------------------------------------------

    def flow(self, s: float, x) -> np.ndarray:
        """``Psi^s``; identity outside the tube and wherever the flow speed vanishes."""
        self._check_s(abs(s))
        x = np.asarray(x, dtype=float)
        out = x.copy()
        t, y, inside = self.chart.tube_coords(x)
        if not np.any(inside):
            return out
        ti, yi = t[inside], y[inside]
        yn = tube_flow(self.cutoffs, s, ti, yi)
        moved = np.any(yn != yi, axis=-1)
        if np.any(moved):
            sub = out[inside]
            sub[moved] = self.chart.forward(ti[moved], yn[moved])
            out[inside] = sub
        return out

    def _check_s(self, s):
        if s < 0 or s > self.s_max * (1 + 1e-12):
            raise BoundViolation(f"s={s} outside [0, s_max={self.s_max}]")

    # --- metrics -------------------------------------------------------

    def _chart_jac(self, t, y):
        return self.chart.jacobian(t, y, h=CHART_JAC_STEP)

    def pulled_back_jacobian(self, s: float, t, y):
        """Coordinates moved by ``Psi^{-s}`` and the chart-space differential of ``Psi^{-s}``."""
        yb, Dy, Dt = tube_flow(self.cutoffs, -s, t, y, with_jacobian=True)
        n = self.dim
        D = np.zeros(np.shape(t) + (n, n))
        D[..., 0, 0] = 1.0
        D[..., 1:, 0] = Dt
        D[..., 1:, 1:] = Dy
        A = self._chart_jac(t, y)
        Bm = self._chart_jac(t, yb)
        Jx = Bm @ D @ np.linalg.inv(A)
        return yb, Jx

    def metric_at(self, s: float, x) -> np.ndarray:
        """``(1 - alpha) g + alpha (Psi^{-s})^* g``; the base value itself where alpha is 0."""
        self._check_s(s)
        x = np.asarray(x, dtype=float)
        g = self.field.g(x)
        if s == 0:
            return g
        t, y, a, _ = self._coords(x)
        act = a != 0
        if not np.any(act):
            return g
        ta, ya, aa = t[act], y[act], a[act]
        yb, Jx = self.pulled_back_jacobian(s, ta, ya)
        xb = self.chart.forward(ta, yb)
        gb = self.field.g(xb)
        g1 = np.swapaxes(Jx, -1, -2) @ gb @ Jx
        out = g.copy()
        mix = (1 - aa)[..., None, None] * g[act] + aa[..., None, None] * g1
        out[act] = 0.5 * (mix + np.swapaxes(mix, -1, -2))
        return out

    def metric_field(self, s: float, fd_step: float = 1e-5) -> MetricField:
        """The perturbed metric as a :class:`MetricField` (finite-difference derivatives)."""
        base = self.field
        return MetricField(
            base.domain,
            lambda x: self.metric_at(s, x),
            fd_step=fd_step,
            inj=base.inj,
            name=f"{base.name}^(s={s:g})",
        )

    def finsler_at(self, s: float, x, vec) -> np.ndarray:
        """``sqrt((1 - alpha) f^2 + alpha f(Psi^{-s} x, D Psi^{-s} vec)^2)``."""
        if self.finsler is None:
            raise ValueError("family was built without a Finsler norm")
        self._check_s(s)
        ff = self.finsler
        x = np.asarray(x, dtype=float)
        vec = np.asarray(vec, dtype=float)
        x, vec = np.broadcast_arrays(x, vec)
        f0 = ff.norm(x, vec)
        if s == 0:
            return f0
        t, y, a, _ = self._coords(x)
        act = a != 0
        if not np.any(act):
            return f0
        ta, ya, aa = t[act], y[act], a[act]
        yb, Jx = self.pulled_back_jacobian(s, ta, ya)
        xb = self.chart.forward(ta, yb)
        f1 = ff.norm(xb, np.einsum("...ij,...j->...i", Jx, vec[act]))
        out = np.array(f0, dtype=float, copy=True)
        out[act] = np.sqrt((1 - aa) * f0[act] ** 2 + aa * f1**2)
        return out

    # --- curves --------------------------------------------------------

    def axis_params(self) -> np.ndarray:
        return np.linspace(-2 * self.chart.eta, 2 * self.chart.eta, self.nodes)

    def base_curve(self) -> GeodesicSegment:
        t = self.axis_params()
        nodes = self.chart.forward(t, np.zeros((t.size, self.dim - 1)))
        return make_segment(self.field, nodes, t, initial=(self.chart.p.copy(), self.chart.v.copy()))

    def displaced_nodes(self, s: float, t=None) -> np.ndarray:
        self._check_s(s)
        t = self.axis_params() if t is None else np.asarray(t, dtype=float)
        y = np.zeros(t.shape + (self.dim - 1,))
        y[..., 0] = self.profile(s, t)
        return self.chart.forward(t, y)

    def displaced(self, s: float, with_residual: bool = True) -> GeodesicSegment:
        t = self.axis_params()
        nodes = self.displaced_nodes(s, t)
        init = (nodes[self.nodes // 2].copy(), self.chart.v.copy())
        if with_residual:
            return make_segment(self.metric_field(s), nodes, t, initial=init)
        return GeodesicSegment(CurveDiscrete(nodes, t), init, float("nan"))

    def dump(self, s: float, points, out_dir, stem: str = "metric_dump"):
        """Write a JSON header and a CSV of metric samples at ``points``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        points = np.atleast_2d(np.asarray(points, dtype=float))
        G = self.metric_at(s, points)
        n = self.dim
        header = {
            "p": [float(c) for c in self.chart.p],
            "v": [float(c) for c in self.chart.v],
            "w": [float(c) for c in self.chart.w],
            "eta": self.chart.eta,
            "eps": self.chart.eps,
            "delta": self.cutoffs.delta,
            "s": float(s),
        }
        jpath = out_dir / f"{stem}.json"
        jpath.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        cpath = out_dir / f"{stem}.csv"
        with cpath.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x_{i + 1}" for i in range(n)] + [f"g_{i + 1}{j + 1}" for i in range(n) for j in range(n)])
            for x, g in zip(points, G):
                w.writerow([repr(float(c)) for c in x] + [repr(float(c)) for c in g.ravel()])
        return jpath, cpath


def make_family(
    chart: TubularChart,
    delta: float,
    s_max: Optional[float] = None,
    finsler: Optional[FinslerField] = None,
    nodes: int = 401,
) -> PerturbationFamily:
    cut = make_cutoffs(delta, chart.eta, chart.eps, delta)
    s_max = delta if s_max is None else min(float(s_max), delta)
    if not s_max > 0:
        raise BoundViolation("s_max must be positive")
    return PerturbationFamily(chart, cut, s_max, finsler, nodes)


# --------------------------------------------------------------------------
# free functions


def alpha_field(family: PerturbationFamily, x) -> np.ndarray:
    return family.alpha(x)


def displacement_flow(family: PerturbationFamily, s: float, x) -> np.ndarray:
    return family.flow(s, x)


def perturbed_metric(family: PerturbationFamily, s: float, x) -> np.ndarray:
    return family.metric_at(s, x)


def perturbed_finsler(family: PerturbationFamily, s: float, x, vec) -> np.ndarray:
    return family.finsler_at(s, x, vec)


def displaced_geodesic(family: PerturbationFamily, s: float) -> GeodesicSegment:
    return family.displaced(s)


def pullback_metric(field: MetricField, diffeo: Callable, x, h: float = PULLBACK_STEP) -> np.ndarray:
    """``D phi^T g(phi(x)) D phi`` with a central-difference Jacobian."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    E = np.eye(n) * h
    pts = np.concatenate([x[..., None, :] + E, x[..., None, :] - E], axis=-2)
    vals = diffeo(pts)
    D = np.swapaxes((vals[..., :n, :] - vals[..., n:, :]) / (2 * h), -1, -2)
    cond = np.linalg.cond(D)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e8):
        raise JacobianIllConditioned("diffeomorphism Jacobian is ill-conditioned")
    g = field.g(diffeo(x))
    out = np.swapaxes(D, -1, -2) @ g @ D
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def pulled_back_field(field: MetricField, diffeo: Callable, h: float = PULLBACK_STEP) -> MetricField:
    return MetricField(field.domain, lambda x: pullback_metric(field, diffeo, x, h), fd_step=field.fd_step, inj=field.inj)


# --------------------------------------------------------------------------
# convexity of t-lines in geodesic parallel form


@dataclass(frozen=True)
class ConvexityReport:
    residual: float
    tolerance: float
    passed: bool
    parallel_form: bool
    note: str = ""


def _parallel_form_defect(g) -> float:
    n = g.shape[-1]
    target = np.zeros(n)
    target[0] = 1.0
    return float(max(np.max(np.abs(g[..., 0, :] - target)), np.max(np.abs(g[..., :, 0] - target))))


def parallel_convexity_check(
    g0: Callable,
    g1: Callable,
    alpha_fn: Callable,
    grid,
    tol: float = 1e-6,
    strict: bool = True,
    fd_step: float = 1e-5,
) -> ConvexityReport:
    """Geodesic residual of the ``t``-lines ``x = const`` under ``alpha g0 + (1 - alpha) g1``.

    ``grid`` is ``(t_values, x_values)`` with ``x_values`` of shape ``(k, n - 1)``.
    Both metrics must have first row and column ``(1, 0, ..., 0)``; with
    ``strict`` a violation raises :class:`NotParallelForm`, otherwise the report
    records it and the residual is still measured.
    """
    tv, xv = grid
    tv = np.asarray(tv, dtype=float)
    xv = np.atleast_2d(np.asarray(xv, dtype=float))
    pts = np.concatenate(
        [np.broadcast_to(tv[None, :, None], (xv.shape[0], tv.size, 1)), np.broadcast_to(xv[:, None, :], (xv.shape[0], tv.size, xv.shape[1]))],
        axis=-1,
    )
    defect = max(_parallel_form_defect(g0(pts)), _parallel_form_defect(g1(pts)))
    parallel = defect <= 1e-10
    if strict and not parallel:
        raise NotParallelForm(f"metric not in geodesic parallel form (defect {defect:.3g})")
    n = pts.shape[-1]
    lo = np.min(pts.reshape(-1, n), axis=0) - 1.0
    hi = np.max(pts.reshape(-1, n), axis=0) + 1.0
    dom = ChartDomain(n, tuple(zip(lo, hi)))

    def blend(x):
        a = np.asarray(alpha_fn(x), dtype=float)[..., None, None]
        return a * g0(x) + (1 - a) * g1(x)

    field = MetricField(dom, blend, fd_step=fd_step)
    # t-line velocity is e_0, acceleration 0: residual is |Gamma^k_00|_g
    gam = christoffel(field, pts)
    r = gam[..., :, 0, 0]
    g = blend(pts)
    res = float(np.max(np.sqrt(np.abs(np.einsum("...i,...ij,...j->...", r, g, r)))))
    ok = parallel and res <= tol
    note = "" if parallel else f"parallel-form defect {defect:.3g}"
    return ConvexityReport(res, tol, bool(ok), bool(parallel), note)


def lipschitz_in_s(family: PerturbationFamily, points, count: int = 100) -> float:
    """Largest ``|g^(s + ds) - g^(s)|_inf / ds`` over ``s`` in a uniform grid."""
    ds = family.s_max / count
    prev = family.metric_at(0.0, points)
    worst = 0.0
    for k in range(1, count + 1):
        cur = family.metric_at(min(k * ds, family.s_max), points)
        worst = max(worst, float(np.max(np.abs(cur - prev))) / ds)
        prev = cur
    return worst


def length_under(field, nodes, params) -> float:
    return curve_length(field, CurveDiscrete(nodes, params)).length
