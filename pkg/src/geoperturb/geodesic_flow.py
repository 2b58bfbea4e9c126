"""Geodesic ODE integration, exponential maps and geodesic residuals."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .chart_metric import (
    CurveDiscrete,
    MetricField,
    christoffel,
    christoffel_deriv,
    gram_schmidt,
    metric_eval,
    norm_sq,
)
from .errors import (
    DomainError,
    DomainEscape,
    NoConvergence,
    NormalFieldFlip,
    StepTooLarge,
    TooFewNodes,
)

DEFAULT_STEP = 0.005
SPEED_TOL = 1e-9


def _accel(field: MetricField, x, v):
    return -np.einsum("...kij,...i,...j->...k", christoffel(field, x), v, v)


def _check_inside(field: MetricField, x):
    ok = field.domain.contains(x)
    if not np.all(ok):
        bad = np.asarray(x)[~ok] if np.ndim(ok) else np.asarray(x)
        raise DomainEscape("geodesic left the chart box", exit_point=np.array(bad).reshape(-1, field.dim)[0])


def rk4_flow(field: MetricField, x, v, tau: float, nsteps: int, record: bool = False, check: bool = True):
    """Fixed-step RK4 for ``x'' = -Gamma(x', x')`` over parameter length ``tau``.

    Broadcasts over leading axes.  With ``record`` the full trajectory
    ``(nsteps + 1, ..., n)`` of positions and velocities is returned.
    """
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    if field.flat:
        if record:
            s = np.linspace(0.0, tau, nsteps + 1).reshape((-1,) + (1,) * x.ndim)
            xs = x + s * v
            if check:
                _check_inside(field, xs)
            return xs, np.broadcast_to(v, xs.shape).copy()
        xe = x + tau * v
        if check:
            _check_inside(field, xe)
        return xe, v
    h = tau / nsteps
    xs, vs = ([x], [v]) if record else (None, None)
    for _ in range(nsteps):
        k1x, k1v = v, _accel(field, x, v)
        k2x = v + 0.5 * h * k1v
        k2v = _accel(field, x + 0.5 * h * k1x, k2x)
        k3x = v + 0.5 * h * k2v
        k3v = _accel(field, x + 0.5 * h * k2x, k3x)
        k4x = v + h * k3v
        k4v = _accel(field, x + h * k3x, k4x)
        x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if check:
            _check_inside(field, x)
        if record:
            xs.append(x)
            vs.append(v)
    if record:
        return np.stack(xs), np.stack(vs)
    return x, v


def _var_rhs(field, x, v, Jx, Jv):
    gam = christoffel(field, x)
    dgam = christoffel_deriv(field, x)
    a = -np.einsum("...kij,...i,...j->...k", gam, v, v)
    A_x = -np.einsum("...kijl,...i,...j->...kl", dgam, v, v)
    A_v = -2 * np.einsum("...kij,...j->...ki", gam, v)
    return v, a, Jv, A_x @ Jx + A_v @ Jv


def rk4_variational(field: MetricField, x, v, tau: float, nsteps: int, Jx=None, Jv=None, check: bool = True):
    """RK4 for the geodesic flow together with its linearisation.

    ``Jx, Jv`` are ``(..., n, m)`` blocks of tangent vectors (Jacobi fields and
    their coordinate derivatives); by default the identity on the position
    (``Jx = I, Jv = 0``).  Returns ``x, v, Jx, Jv`` at parameter ``tau``.
    """
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    n = x.shape[-1]
    if Jx is None:
        Jx = np.broadcast_to(np.eye(n), x.shape + (n,)).copy()
    if Jv is None:
        Jv = np.zeros_like(Jx)
    h = tau / nsteps
    for _ in range(nsteps):
        k1 = _var_rhs(field, x, v, Jx, Jv)
        k2 = _var_rhs(field, *(a + 0.5 * h * b for a, b in zip((x, v, Jx, Jv), k1)))
        k3 = _var_rhs(field, *(a + 0.5 * h * b for a, b in zip((x, v, Jx, Jv), k2)))
        k4 = _var_rhs(field, *(a + h * b for a, b in zip((x, v, Jx, Jv), k3)))
        x, v, Jx, Jv = (
            a + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
            for a, b1, b2, b3, b4 in zip((x, v, Jx, Jv), k1, k2, k3, k4)
        )
        if check:
            _check_inside(field, x)
    return x, v, Jx, Jv


# --------------------------------------------------------------------------
# segments


@dataclass(frozen=True)
class GeodesicSegment:
    """Sampled unit-speed curve plus its measured geodesic defect."""

    curve: CurveDiscrete
    initial: Tuple[np.ndarray, np.ndarray]
    residual_max: float
    residuals: Optional[np.ndarray] = None

    @property
    def nodes(self) -> np.ndarray:
        return self.curve.nodes

    @property
    def params(self) -> np.ndarray:
        return self.curve.params

    def to_csv(self, path) -> Path:
        path = Path(path)
        n = self.curve.dim
        res = self.residuals if self.residuals is not None else np.full(len(self.params), np.nan)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + ["residual"])
            for t, x, r in zip(self.params, self.nodes, res):
                w.writerow([repr(float(t))] + [repr(float(c)) for c in x] + [repr(float(r))])
        return path


def make_segment(field: MetricField, nodes, params, initial=None, closed: bool = False) -> GeodesicSegment:
    """Wrap sampled nodes as a :class:`GeodesicSegment`, measuring the residual."""
    c = CurveDiscrete(nodes, params, closed)
    if initial is None:
        d1, _ = c.derivatives()
        initial = (c.nodes[0].copy(), d1[0].copy())
    if len(c.params) >= 7:
        res = geodesic_residual(field, c, per_node=True)
        rmax = float(np.nanmax(res))
    else:
        res, rmax = None, float("nan")
    return GeodesicSegment(c, initial, rmax, res)


def integrate_geodesic(field: MetricField, p, v, span=(0.0, 1.0), step: float = DEFAULT_STEP) -> GeodesicSegment:
    """Unit-speed geodesic through ``p`` with velocity ``v`` at parameter 0.

    The returned nodes are uniformly spaced on ``span``; the node spacing is
    the largest value not exceeding ``step``.
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    t0, t1 = float(span[0]), float(span[1])
    if not t1 > t0:
        raise ValueError("span must be increasing")
    if step <= 0:
        raise ValueError("step must be positive")
    speed = np.sqrt(norm_sq(field, p, v))
    if abs(speed - 1) > SPEED_TOL:
        raise ValueError(f"initial vector must be unit length, got {speed:.12g}")
    _check_inside(field, p)
    if t0 != 0.0:
        k = max(1, int(np.ceil(abs(t0) / step)))
        xs, vs = rk4_flow(field, p, v, t0, k)
    else:
        xs, vs = p, v
    m = max(2, int(np.ceil((t1 - t0) / step)))
    X, V = rk4_flow(field, xs, vs, t1 - t0, m, record=True)
    params = np.linspace(t0, t1, m + 1)
    speeds = np.sqrt(norm_sq(field, X, V))
    drift = float(np.max(np.abs(speeds - 1)))
    if drift > 1e-7 * max(1.0, t1 - t0):
        raise StepTooLarge(f"speed drift {drift:.3g} exceeds bound; reduce the step")
    return make_segment(field, X, params, initial=(p.copy(), v.copy()))


def exp_map(field: MetricField, p, x, step: float = DEFAULT_STEP) -> np.ndarray:
    """``exp_p(x)``; broadcasts over leading axes of ``x``."""
    p = np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    if field.flat:
        out = p + x
        _check_inside(field, out)
        return out
    lengths = np.sqrt(norm_sq(field, np.broadcast_to(p, x.shape), x))
    if np.any(lengths >= field.inj):
        raise DomainError("tangent vector exceeds the injectivity bound")
    longest = float(np.max(lengths)) if lengths.size else 0.0
    if longest == 0.0:
        return np.broadcast_to(p, x.shape).copy()
    nsteps = max(1, int(np.ceil(longest / step)))
    out, _ = rk4_flow(field, np.broadcast_to(p, x.shape), x, 1.0, nsteps)
    return out


def exp_with_jacobian(field: MetricField, p, x, step: float = DEFAULT_STEP, nsteps: Optional[int] = None):
    """``exp_p(x)``, its differential in ``x``, and the final velocity."""
    p = np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if field.flat:
        return p + x, np.broadcast_to(np.eye(n), x.shape + (n,)).copy(), x.copy()
    if nsteps is None:
        longest = float(np.max(np.sqrt(norm_sq(field, np.broadcast_to(p, x.shape), x))))
        nsteps = max(2, int(np.ceil(longest / step)))
    P = np.broadcast_to(p, x.shape)
    Jx = np.zeros(x.shape + (n,))
    Jv = np.broadcast_to(np.eye(n), x.shape + (n,)).copy()
    q, vq, J, _ = rk4_variational(field, P, x, 1.0, nsteps, Jx, Jv)
    return q, J, vq


def log_map_batch(field: MetricField, p, q, tol: float = 1e-12, max_iter: int = 30, step: float = DEFAULT_STEP):
    """Newton shooting for ``x`` with ``exp_p(x) = q``; returns ``x`` and a convergence mask."""
    p = np.asarray(p, dtype=float)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    dom = field.domain
    if field.flat:
        return dom.displacement(p, q), np.ones(q.shape[0], dtype=bool)
    x = dom.displacement(p, q)
    qn = dom.lift_near(q, p + x)
    ok = np.zeros(q.shape[0], dtype=bool)
    P = np.broadcast_to(p, q.shape)
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            act = np.flatnonzero(~ok & np.all(np.isfinite(x), axis=-1))
            if act.size == 0:
                break
            longest = float(np.nanmax(np.sqrt(np.abs(norm_sq(field, P[act], x[act])))))
            if not np.isfinite(longest) or longest >= field.inj:
                bad = act[~(np.sqrt(np.abs(norm_sq(field, P[act], x[act]))) < field.inj)]
                x[bad] = np.nan
                continue
            nsteps = max(2, int(np.ceil(longest / step)))
            n = field.dim
            Jx = np.zeros((act.size, n, n))
            Jv = np.broadcast_to(np.eye(n), (act.size, n, n)).copy()
            try:
                e, _, J, _ = rk4_variational(field, P[act], x[act], 1.0, nsteps, Jx, Jv, check=False)
                r = dom.displacement(qn[act], e)
                conv = np.max(np.abs(r), axis=-1) < tol
                ok[act[conv]] = True
                upd = ~conv
                x[act[upd]] = x[act[upd]] - np.linalg.solve(J[upd], r[upd][..., None])[..., 0]
            except np.linalg.LinAlgError:
                x[act] = np.nan
            inside = dom.contains(p + x[act])
            x[act[~inside & ~ok[act]]] = np.nan
    return x, ok


def log_map(field: MetricField, p, q, tol: float = 1e-12, max_iter: int = 30, step: float = DEFAULT_STEP):
    """Newton shooting for ``x`` with ``exp_p(x) = q``; broadcasts over ``q``."""
    q = np.asarray(q, dtype=float)
    x, ok = log_map_batch(field, p, q.reshape(-1, q.shape[-1]), tol, max_iter, step)
    if not np.all(ok):
        raise NoConvergence("log map shooting did not converge")
    return x.reshape(q.shape)


def geodesic_distance(field: MetricField, p, q, **kw) -> np.ndarray:
    """Length of the shooting geodesic from ``p`` to ``q`` (closed form when flat)."""
    p = np.asarray(p, dtype=float)
    x = log_map(field, p, q, **kw)
    return np.sqrt(norm_sq(field, np.broadcast_to(p, x.shape), x))


# --------------------------------------------------------------------------
# hypersurfaces and the normal exponential map


@dataclass(frozen=True)
class HypersurfacePatch:
    """The geodesic hypersurface ``exp_p`` of the ``g_p``-orthogonal complement of ``v``."""

    field: MetricField
    base: np.ndarray
    normal_seed: np.ndarray
    radius: float

    def complement_basis(self, seeds=None) -> np.ndarray:
        """``g_p``-orthonormal basis of ``v``-perp as columns, seeded in order."""
        n = self.field.dim
        g = self.field.g(self.base)
        lead = [np.asarray(self.normal_seed, dtype=float)]
        seeds = list(seeds or []) + list(np.eye(n))
        return gram_schmidt(g, lead + seeds)[:, 1:n]

    def sample(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.any(np.sqrt(norm_sq(self.field, np.broadcast_to(self.base, x.shape), x)) >= self.radius * (1 + 1e-12)):
            raise DomainError("point outside the patch radius")
        return exp_map(self.field, self.base, x)

    def normal(self, x, nsteps: Optional[int] = None):
        """Foot point ``exp_p(x)`` and unit normal ``nu`` there, continued from ``nu(p) = v``."""
        x = np.asarray(x, dtype=float)
        q, J, _ = exp_with_jacobian(self.field, self.base, x, nsteps=nsteps)
        B = self.complement_basis()
        tang = J @ B
        return q, unit_normal(self.field, q, tang, self.normal_seed)


def unit_normal(field: MetricField, q, tangents, seed) -> np.ndarray:
    """Project ``seed`` to the ``g_q``-orthogonal complement of the columns of ``tangents``."""
    g = field.g(q)
    G = np.einsum("...ia,...ij,...jb->...ab", tangents, g, tangents)
    rhs = np.einsum("...ia,...ij,j->...a", tangents, g, seed)
    coef = np.linalg.solve(G, rhs[..., None])[..., 0]
    nu = seed - np.einsum("...ia,...a->...i", tangents, coef)
    nn = np.sqrt(np.einsum("...i,...ij,...j->...", nu, g, nu))
    seed_len = np.sqrt(np.einsum("i,...ij,j->...", seed, g, seed))
    if np.any(nn < 0.5 * seed_len):
        raise NormalFieldFlip("normal field lost continuity with the seed direction")
    return nu / nn[..., None]


def normal_exp(field: MetricField, patch: HypersurfacePatch, t, x, step: float = DEFAULT_STEP) -> np.ndarray:
    """``exp(t * nu(exp_p(x)))`` for a normal-complement vector ``x``."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if field.flat:
        return patch.base + x + t[..., None] * patch.normal_seed
    q, nu = patch.normal(x)
    vel = t[..., None] * nu
    tmax = float(np.max(np.abs(t))) if t.size else 0.0
    nsteps = max(1, int(np.ceil(tmax / step)))
    out, _ = rk4_flow(field, q, vel, 1.0, nsteps)
    return out


# --------------------------------------------------------------------------
# residuals


def geodesic_residual(field: MetricField, c: CurveDiscrete, per_node: bool = False):
    """Largest ``g``-norm of ``x'' + Gamma(x', x')`` over interior nodes.

    Uses five-point fourth order stencils, so the curve must be uniformly
    sampled.  Closed curves are differenced periodically and every node
    counts as interior.
    """
    if len(c.params) < 7:
        raise TooFewNodes(f"need at least 7 nodes, got {len(c.params)}")
    d1, d2 = c.derivatives()
    res = np.full(len(c.params), np.nan)
    sl = slice(0, -1) if c.closed else slice(2, -2)
    x = c.nodes[sl]
    r = d2[sl] + np.einsum("...kij,...i,...j->...k", christoffel(field, x), d1[sl], d1[sl])
    res[sl] = np.sqrt(np.abs(norm_sq(field, x, r)))
    if c.closed:
        res[-1] = res[0]
    return res if per_node else float(np.nanmax(res))
