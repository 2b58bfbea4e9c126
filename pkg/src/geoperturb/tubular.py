"""Tubular coordinates ``(t, y)`` around a geodesic segment and the region decomposition.

A chart is built from a base point ``p``, a unit direction ``v`` and a unit
vector ``w`` orthogonal to it.  The point with coordinates ``(t, y)`` is
reached by walking from ``p`` along the geodesic hypersurface orthogonal to
``v`` (to ``exp_p(B y)``) and then a distance ``t`` along the continued unit
normal.  ``B`` is a ``g_p``-orthonormal basis of ``v``-perp whose first column
is ``w``, so ``w`` has disc coordinates ``e_1`` of ``y`` (the second
coordinate overall).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from enum import IntEnum
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .chart_metric import MetricField, gram_schmidt, norm_sq
from .errors import (
    BoundViolation,
    InverseDiverged,
    NormalFieldFlip,
    NotOrthonormal,
)
from .geodesic_flow import log_map_batch, rk4_flow, rk4_variational, unit_normal

ORTHO_TOL = 1e-9
NEWTON_TOL = 1e-12
SHOOT_STEP = 0.05


class RegionLabel(IntEnum):
    CoreTube = 0
    UMinus = 1
    UPlus = 2
    Shell = 3
    Outside = 4


@dataclass(frozen=True, eq=False)
class TubularChart:
    field: MetricField
    p: np.ndarray
    v: np.ndarray
    w: np.ndarray
    eta: float
    eps: float
    basis: np.ndarray
    t_steps: int
    y_steps: int
    _tree: Optional[cKDTree] = dc_field(default=None, repr=False)
    _reach: float = 0.0
    _grid_z: Optional[np.ndarray] = dc_field(default=None, repr=False)
    _grid_x: Optional[np.ndarray] = dc_field(default=None, repr=False)
    _grid_jinv: Optional[np.ndarray] = dc_field(default=None, repr=False)
    _guess_err: float = np.inf

    @property
    def dim(self) -> int:
        return self.field.dim

    # --- disc isometry -------------------------------------------------

    def zeta(self, x) -> np.ndarray:
        """Coordinates of a ``v``-perp vector in the orthonormal basis (``zeta(w) = e_1``)."""
        g = self.field.g(self.p)
        return np.einsum("ia,ij,...j->...a", self.basis, g, np.asarray(x, dtype=float))

    def zeta_inv(self, y) -> np.ndarray:
        return np.einsum("ia,...a->...i", self.basis, np.asarray(y, dtype=float))

    # --- forward map ---------------------------------------------------

    def forward(self, t, y) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        t, y = np.broadcast_arrays(t[..., None], y)
        t = t[..., 0]
        if self.field.flat:
            return self.p + t[..., None] * self.v + self.zeta_inv(y)
        X = self.zeta_inv(y)
        P = np.broadcast_to(self.p, X.shape)
        q, J, _ = _exp_jac_nocheck(self.field, P, X, self.y_steps)
        nu = unit_normal(self.field, q, J @ self.basis, self.v)
        out, _ = rk4_flow(self.field, q, t[..., None] * nu, 1.0, self.t_steps, check=False)
        return out

    def jacobian(self, t, y, h: float = 1e-6) -> np.ndarray:
        """Differential of ``forward`` in ``(t, y)``; columns are coordinate directions."""
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        n = self.dim
        if self.field.flat:
            J = np.concatenate([self.v[:, None], self.basis], axis=1)
            return np.broadcast_to(J, t.shape + (n, n)).copy()
        ty = np.concatenate([t[..., None], y], axis=-1)
        E = np.eye(n) * h
        pts = np.concatenate([ty[..., None, :] + E, ty[..., None, :] - E], axis=-2)
        vals = self.forward(pts[..., 0], pts[..., 1:])
        return np.swapaxes((vals[..., :n, :] - vals[..., n:, :]) / (2 * h), -1, -2)

    # --- inverse -------------------------------------------------------

    def affine_guess(self, x):
        d = self.field.domain.displacement(self.p, x)
        g = self.field.g(self.p)
        return d @ g @ self.v, self.zeta(d)

    def try_inverse(self, x, max_iter: int = 30):
        """Newton inverse.  Returns ``t, y, converged`` with a per-point mask."""
        x = np.asarray(x, dtype=float)
        if self.field.flat:
            t, y = self.affine_guess(x)
            return t, y, np.ones(t.shape, dtype=bool)
        dom = self.field.domain
        shape = x.shape[:-1]
        X = x.reshape(-1, self.dim)
        Xl = dom.lift_near(X, self.p)
        t, y, r, rn = self._chord(Xl)
        done = rn < NEWTON_TOL
        for _ in range(max_iter):
            act = np.flatnonzero(~done & np.isfinite(rn))
            if act.size == 0:
                break
            J = self.jacobian(t[act], y[act])
            try:
                step = np.linalg.solve(J, r[act][..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(J.reshape(-1, self.dim, self.dim)[0], r[act][0], rcond=None)[0][None]
            lam = np.ones(act.size)
            pending = np.arange(act.size)
            for _ in range(12):
                tn = t[act[pending]] - lam[pending] * step[pending, 0]
                yn = y[act[pending]] - lam[pending, None] * step[pending, 1:]
                rnew = self._defect(tn, yn, Xl[act[pending]])
                nn = np.linalg.norm(rnew, axis=-1)
                good = np.isfinite(nn) & (nn < rn[act[pending]])
                idx = act[pending[good]]
                t[idx], y[idx], r[idx], rn[idx] = tn[good], yn[good], rnew[good], nn[good]
                pending = pending[~good]
                if pending.size == 0:
                    break
                lam[pending] *= 0.5
            done = rn < NEWTON_TOL
            if pending.size:
                # no descent possible at the floor of floating point
                stuck = act[pending]
                done[stuck] |= rn[stuck] < 1e3 * NEWTON_TOL
        ok = done & np.isfinite(rn)
        return t.reshape(shape), y.reshape(shape + (self.dim - 1,)), ok.reshape(shape)

    def _chord(self, Xl, iters: int = 8):
        """Start from the nearest precomputed grid node and iterate with its frozen Jacobian."""
        if self._grid_z is None:
            t, y = self.affine_guess(Xl)
            r = self._defect(t, y, Xl)
            return t, y, r, np.linalg.norm(r, axis=-1)
        _, idx = self._tree.query(Xl)
        Jinv = self._grid_jinv[idx]
        z = self._grid_z[idx] + np.einsum("...ij,...j->...i", Jinv, Xl - self._grid_x[idx])
        r = self._defect(z[:, 0], z[:, 1:], Xl)
        rn = np.linalg.norm(r, axis=-1)
        act = np.flatnonzero(rn >= NEWTON_TOL)
        for _ in range(iters):
            if act.size == 0:
                break
            zn = z[act] - np.einsum("...ij,...j->...i", Jinv[act], r[act])
            rnew = self._defect(zn[:, 0], zn[:, 1:], Xl[act])
            nn = np.linalg.norm(rnew, axis=-1)
            good = np.isfinite(nn) & (nn < rn[act])
            ga = act[good]
            z[ga], r[ga], rn[ga] = zn[good], rnew[good], nn[good]
            act = ga[rn[ga] >= NEWTON_TOL]
        return z[:, 0].copy(), z[:, 1:].copy(), r, rn

    def _defect(self, t, y, Xl):
        with np.errstate(all="ignore"):
            try:
                f = self.forward(t, y)
            except (np.linalg.LinAlgError, NormalFieldFlip):
                return np.full(Xl.shape, np.nan)
        return f - Xl

    def inverse(self, x):
        t, y, ok = self.try_inverse(x)
        if not np.all(ok):
            bad = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, self.dim)[~np.atleast_1d(ok).ravel()]
            raise InverseDiverged("Newton inverse did not converge", worst_point=bad[0])
        return t, y

    # --- tube membership -----------------------------------------------

    def near_tube(self, x) -> np.ndarray:
        """Cheap necessary test for lying in the closed tube (KD-tree on a tube grid)."""
        x = np.asarray(x, dtype=float)
        if self._tree is None:
            return np.ones(x.shape[:-1], dtype=bool)
        xl = self.field.domain.lift_near(x, self.p)
        d, _ = self._tree.query(xl.reshape(-1, self.dim))
        return (d <= self._reach).reshape(x.shape[:-1])

    def coarse_coords(self, x):
        """Linearised guess from the nearest grid node; within ``_guess_err`` inside the tube."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        if self.field.flat:
            return self.affine_guess(x)
        xl = self.field.domain.lift_near(x, self.p)
        _, idx = self._tree.query(xl)
        z = self._grid_z[idx] + np.einsum("...ij,...j->...i", self._grid_jinv[idx], xl - self._grid_x[idx])
        return z[:, 0], z[:, 1:]

    def tube_coords(self, x, window=None):
        """``(t, y, inside)`` where ``inside`` marks ``|t| <= 2 eta`` and ``|y| < eps``.

        With ``window = (t_lo, t_hi, r_hi)`` only points that may satisfy
        ``t_lo < |t| < t_hi`` and ``|y| < r_hi`` are inverted exactly; the
        others are certified outside the window by the grid guess and come
        back as NaN.
        """
        x = np.asarray(x, dtype=float)
        flat_x = x.reshape(-1, self.dim)
        m = flat_x.shape[0]
        t = np.full(m, np.nan)
        y = np.full((m, self.dim - 1), np.nan)
        near = self.near_tube(flat_x)
        if window is not None and not self.field.flat and np.isfinite(self._guess_err) and np.any(near):
            t_lo, t_hi, r_hi = window
            idx = np.flatnonzero(near)
            tg, yg = self.coarse_coords(flat_x[idx])
            e = self._guess_err
            at = np.abs(tg)
            maybe = (at > t_lo - e) & (at < t_hi + e) & (np.linalg.norm(yg, axis=-1) < r_hi + e)
            near[idx[~maybe]] = False
        cand = np.flatnonzero(near)
        if cand.size:
            tc, yc, ok = self.try_inverse(flat_x[cand])
            t[cand[ok]] = tc[ok]
            y[cand[ok]] = yc[ok]
        with np.errstate(invalid="ignore"):
            inside = (np.abs(t) <= 2 * self.eta) & (np.linalg.norm(y, axis=-1) < self.eps)
        return t.reshape(x.shape[:-1]), y.reshape(x.shape[:-1] + (self.dim - 1,)), inside.reshape(x.shape[:-1])


def _exp_jac_nocheck(field, P, X, nsteps):
    n = X.shape[-1]
    Jx = np.zeros(X.shape + (n,))
    Jv = np.broadcast_to(np.eye(n), X.shape + (n,)).copy()
    q, _, J, _ = rk4_variational(field, P, X, 1.0, nsteps, Jx, Jv, check=False)
    return q, J, None


def complement_basis(field: MetricField, p, v, w) -> np.ndarray:
    """``g_p``-orthonormal basis of ``v``-perp with ``w`` first, then coordinate axes."""
    n = field.dim
    g = field.g(p)
    return gram_schmidt(g, [v, w] + list(np.eye(n)))[:, 1:n]


def build_tubular_chart(
    field: MetricField,
    p,
    v,
    w,
    eta: float,
    eps: float,
    step: float = 0.025,
    check_shell: bool = True,
) -> TubularChart:
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    g = field.g(p)
    if abs(v @ g @ v - 1) > ORTHO_TOL or abs(w @ g @ w - 1) > ORTHO_TOL or abs(v @ g @ w) > ORTHO_TOL:
        raise NotOrthonormal("v and w must be g-orthonormal at p")
    if not (eta > 0 and eps > 0 and 7 * eps < eta):
        raise BoundViolation(f"need 0 < 7*eps < eta, got eps={eps}, eta={eta}")
    if eta >= field.inj / 3:
        raise BoundViolation(f"eta={eta} must stay below inj/3={field.inj / 3}")
    B = complement_basis(field, p, v, w)
    t_steps = max(4, int(np.ceil(2 * eta / step)))
    y_steps = max(4, int(np.ceil(eps / step)))
    chart = TubularChart(field, p, v, w, float(eta), float(eps), B, t_steps, y_steps)
    _attach_grid(chart)
    if check_shell:
        _check_shell_containment(chart)
    return chart


def _attach_grid(chart: TubularChart):
    """Sample the closed tube on a grid; store points and inverse Jacobians for the inverse."""
    eta, eps, m = chart.eta, chart.eps, chart.dim - 1
    nt = max(9, int(np.ceil(4 * eta / (eps / 2)))) + 1
    ts = np.linspace(-2 * eta, 2 * eta, nt)
    ny = 5 if m <= 2 else 3
    axes1 = np.linspace(-eps, eps, ny)
    ys = np.stack(np.meshgrid(*([axes1] * m), indexing="ij"), axis=-1).reshape(-1, m)
    ys = ys[np.linalg.norm(ys, axis=-1) <= eps * (1 + 1e-12)]
    T = np.repeat(ts, ys.shape[0])
    Y = np.tile(ys, (ts.size, 1))
    X = chart.forward(T, Y)
    J = chart.jacobian(T, Y)
    tree = cKDTree(X)
    rng = np.random.default_rng(12345)
    k = 400
    Ts = rng.uniform(-2 * eta, 2 * eta, k)
    Ys = rng.normal(size=(k, m))
    Ys *= (eps * rng.uniform(0, 1, (k, 1)) ** (1 / m)) / np.linalg.norm(Ys, axis=-1, keepdims=True)
    Ys[: 2 * m] = np.vstack([np.eye(m), -np.eye(m)]) * eps
    Xs = chart.forward(Ts, Ys)
    reach = float(np.max(tree.query(Xs)[0]))
    _, idx = tree.query(Xs)
    Jinv = np.linalg.inv(J)
    z = np.column_stack([T, Y])[idx] + np.einsum("...ij,...j->...i", Jinv[idx], Xs - X[idx])
    err = float(np.max(np.abs(z - np.column_stack([Ts, Ys]))))
    spacing = float(np.max(np.linalg.norm(np.diff(X[:: ys.shape[0]], axis=0), axis=-1)))
    object.__setattr__(chart, "_tree", tree)
    object.__setattr__(chart, "_reach", 1.5 * reach + spacing)
    object.__setattr__(chart, "_grid_z", np.column_stack([T, Y]))
    object.__setattr__(chart, "_grid_x", X)
    object.__setattr__(chart, "_grid_jinv", Jinv)
    # safety factor over the sampled worst case of the linearised guess
    object.__setattr__(chart, "_guess_err", 3.0 * err + 1e-3 * eps)


def _ring(m: int, count: int) -> np.ndarray:
    if m == 1:
        return np.array([[1.0], [-1.0]])
    ang = np.linspace(0, 2 * np.pi, count, endpoint=False)
    out = np.zeros((count, m))
    out[:, 0] = np.cos(ang)
    out[:, 1] = np.sin(ang)
    return out


def _check_shell_containment(chart: TubularChart):
    eta, eps = chart.eta, chart.eps
    ring = _ring(chart.dim - 1, 8) * (0.999 * eps)
    ring = np.vstack([np.zeros((1, chart.dim - 1)), ring])
    ts = np.array([eta * (1 + 1e-6), eta + 3 * eps, eta + 6 * eps * (1 - 1e-6)])
    ts = np.concatenate([ts, -ts])
    tt = np.repeat(ts, ring.shape[0])
    yy = np.tile(ring, (ts.size, 1))
    pts = chart.forward(tt, yy)
    d = shell_distance(chart, pts)
    if np.any(d <= eta) or np.any(d >= eta + 7 * eps):
        raise BoundViolation("U sets are not contained in the spherical shell for this eps")


def shell_distance(chart: TubularChart, x) -> np.ndarray:
    """Geodesic distance from the chart base point (closed form when flat)."""
    field = chart.field
    x = np.asarray(x, dtype=float)
    if field.flat:
        d = field.domain.displacement(chart.p, x)
        return np.sqrt(norm_sq(field, x, d))
    flat_x = x.reshape(-1, chart.dim)
    lx, ok = log_map_batch(field, chart.p, flat_x, tol=1e-10, step=SHOOT_STEP)
    out = np.full(flat_x.shape[0], np.inf)
    P = np.broadcast_to(chart.p, lx.shape)
    out[ok] = np.sqrt(norm_sq(field, P[ok], lx[ok]))
    return out.reshape(x.shape[:-1])


def classify_region(chart: TubularChart, x) -> np.ndarray:
    """Region labels (``RegionLabel`` values); broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    t, y, inside = chart.tube_coords(x)
    eta, eps = chart.eta, chart.eps
    with np.errstate(invalid="ignore"):
        ry = np.linalg.norm(y, axis=-1)
        disc = ry < eps
        labels = np.full(x.shape[:-1], RegionLabel.Outside, dtype=int)
        core = disc & (np.abs(t) <= eta)
        um = disc & (t > -eta - 6 * eps) & (t < -eta)
        up = disc & (t > eta) & (t < eta + 6 * eps)
    labels[core] = RegionLabel.CoreTube
    labels[um] = RegionLabel.UMinus
    labels[up] = RegionLabel.UPlus
    rest = ~(core | um | up)
    if np.any(rest):
        xr = x[rest]
        # chart-distance prefilter before geodesic shooting
        d_chart = np.linalg.norm(chart.field.domain.displacement(chart.p, xr), axis=-1)
        lam = np.linalg.eigvalsh(chart.field.g(chart.p))
        bound = 2.0 * (eta + 7 * eps) / np.sqrt(lam[0])
        d = np.full(xr.shape[0], np.inf)
        near = d_chart < bound
        if np.any(near):
            d[near] = shell_distance(chart, xr[near])
        sub = np.where((d > eta) & (d < eta + 7 * eps), RegionLabel.Shell, RegionLabel.Outside)
        labels[rest] = sub
    return labels


def in_U(chart: TubularChart, x) -> np.ndarray:
    """Membership in the union of the two U sets (no distance computation)."""
    t, y, _ = chart.tube_coords(x, window=(chart.eta, chart.eta + 6 * chart.eps, chart.eps))
    with np.errstate(invalid="ignore"):
        disc = np.linalg.norm(y, axis=-1) < chart.eps
        at = np.abs(t)
        return disc & (at > chart.eta) & (at < chart.eta + 6 * chart.eps)


@dataclass(frozen=True)
class SurfaceSample:
    t: np.ndarray
    s: np.ndarray
    points: np.ndarray

    def to_csv(self, path) -> Path:
        path = Path(path)
        n = self.points.shape[-1]
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "s"] + [f"x_{i + 1}" for i in range(n)])
            for i, t in enumerate(self.t):
                for j, s in enumerate(self.s):
                    w.writerow([repr(float(t)), repr(float(s))] + [repr(float(c)) for c in self.points[i, j]])
        return path


def local_surface(chart: TubularChart, grid: Tuple[int, int] = (41, 11)) -> SurfaceSample:
    """Samples of the surface swept by ``w``-displaced normal geodesics."""
    nt, ns = grid
    t = np.linspace(-2 * chart.eta, 2 * chart.eta, nt)
    s = np.linspace(-chart.eps, chart.eps, ns + 2)[1:-1]
    T, S = np.meshgrid(t, s, indexing="ij")
    Y = np.zeros(T.shape + (chart.dim - 1,))
    Y[..., 0] = S
    return SurfaceSample(t, s, chart.forward(T, Y))
