"""Crossing detection for sampled curves and removal of crossings at a common point.

Detection works in chart coordinates with a uniform spatial hash (cell size
``2 tol``).  Close node pairs are grouped into events, refined on spline
interpolants and checked for transversality with the ``g``-angle.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .bump_perturb import PerturbationFamily, make_family
from .chart_metric import ChartDomain, CurveDiscrete, MetricField, gram_schmidt
from .errors import (
    BoundViolation,
    DimensionTooLow,
    EpsilonExhausted,
    GeometricallyEquivalent,
    MonotonicityLost,
    NoIntersectionCurve,
    NonTransversalContact,
    OffsetSelectionFailed,
    SeedSearchFailed,
)
from .geodesic_flow import GeodesicSegment, make_segment
from .tubular import TubularChart, build_tubular_chart, in_U

ANGLE_FLOOR = 1e-3
REFINE_TOL = 1e-8
# refined distance below which two arcs count as meeting
CONTACT_TOL = 1e-9
# refined parameters closer than this are the same crossing
MERGE_TOL = 1e-6


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class IntersectionEvent:
    param_a: float
    param_b: float
    point: np.ndarray
    angle: float
    distance: float

    def as_dict(self) -> dict:
        return {
            "param_a": float(self.param_a),
            "param_b": float(self.param_b),
            "point": [float(c) for c in self.point],
            "angle": float(self.angle),
            "distance": float(self.distance),
        }


@dataclass(frozen=True)
class IntersectionReport:
    events: Tuple[IntersectionEvent, ...]
    clearance: float
    tolerance: float

    @property
    def count(self) -> int:
        return len(self.events)

    def as_dict(self) -> dict:
        return {
            "events": [e.as_dict() for e in self.events],
            "clearance": float(self.clearance),
            "tolerance": float(self.tolerance),
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# --------------------------------------------------------------------------
# geometry helpers on possibly periodic charts


def _replicate(domain: ChartDomain, pts: np.ndarray, reach: float):
    """Reduced copies of ``pts`` shifted by periods so that minimal images are plain differences."""
    red = domain.reduce(pts)
    idx = np.arange(len(pts))
    if not domain.is_periodic:
        return red, idx
    per = np.flatnonzero(~np.isnan(domain.periods))
    outs, ids = [red], [idx]
    for signs in itertools.product((-1, 0, 1), repeat=per.size):
        if not any(signs):
            continue
        shift = np.zeros(domain.dim)
        keep = np.ones(len(pts), dtype=bool)
        for ax, sg in zip(per, signs):
            P = domain.periods[ax]
            shift[ax] = sg * P
            lo = domain.lower[ax]
            # only copies that can land within ``reach`` of the box matter
            keep &= (red[:, ax] - lo < reach) if sg > 0 else (lo + P - red[:, ax] < reach) if sg < 0 else True
        if np.any(keep):
            outs.append(red[keep] + shift)
            ids.append(idx[keep])
    return np.vstack(outs), np.concatenate(ids)


def hash_close_pairs(A: np.ndarray, B: np.ndarray, tol: float, domain: ChartDomain):
    """All index pairs ``(i, j)`` with chart distance ``|A_i - B_j| < tol`` via a spatial hash."""
    cell = 2.0 * tol
    Ar = domain.reduce(A)
    Bx, Bid = _replicate(domain, B, tol)
    ka = np.floor(Ar / cell).astype(np.int64)
    kb = np.floor(Bx / cell).astype(np.int64)
    buckets: Dict[tuple, List[int]] = {}
    for r, key in enumerate(map(tuple, kb)):
        buckets.setdefault(key, []).append(r)
    groups: Dict[tuple, List[int]] = {}
    for i, key in enumerate(map(tuple, ka)):
        groups.setdefault(key, []).append(i)
    offsets = list(itertools.product((-1, 0, 1), repeat=A.shape[1]))
    pi, pj = [], []
    for key, members in groups.items():
        near = []
        for off in offsets:
            near.extend(buckets.get(tuple(k + o for k, o in zip(key, off)), ()))
        if not near:
            continue
        near = np.asarray(near)
        mem = np.asarray(members)
        d = np.linalg.norm(Ar[mem][:, None, :] - Bx[near][None, :, :], axis=-1)
        a, b = np.nonzero(d < tol)
        pi.append(mem[a])
        pj.append(Bid[near[b]])
    if not pi:
        return np.empty((0, 2), dtype=np.int64)
    pairs = np.unique(np.column_stack([np.concatenate(pi), np.concatenate(pj)]), axis=0)
    return pairs


def brute_close_pairs(A: np.ndarray, B: np.ndarray, tol: float, domain: ChartDomain):
    """O(N M) reference for :func:`hash_close_pairs`."""
    out = []
    for lo in range(0, len(A), 256):
        d = np.linalg.norm(domain.displacement(A[lo : lo + 256, None, :], B[None, :, :]), axis=-1)
        hit = np.argwhere(d < tol)
        hit[:, 0] += lo
        out.append(hit)
    return np.vstack(out) if out else np.empty((0, 2), dtype=np.int64)


def _nearest(domain: ChartDomain, A: np.ndarray, B: np.ndarray, reach: float = np.inf):
    """Distance from each ``A`` node to the node set ``B`` (minimal image)."""
    if domain.is_periodic:
        span = float(np.nanmax(domain.periods))
        Bx, _ = _replicate(domain, B, span)
        return cKDTree(Bx).query(domain.reduce(A))[0]
    return cKDTree(B).query(A)[0]


def hausdorff(domain: ChartDomain, A: np.ndarray, B: np.ndarray) -> float:
    return float(max(np.max(_nearest(domain, A, B)), np.max(_nearest(domain, B, A))))


# --------------------------------------------------------------------------
# event assembly


class _Interp:
    """Spline interpolant of a sampled curve (periodic for closed curves)."""

    def __init__(self, c: CurveDiscrete):
        self.c = c
        self.closed = c.closed
        self.t0, self.t1 = float(c.params[0]), float(c.params[-1])
        if c.closed:
            span = self.t1 - self.t0
            lin = np.outer((c.params - self.t0) / span, c.shift)
            self.shift = c.shift
            self.spl = CubicSpline(c.params, c.nodes - lin, bc_type="periodic")
        else:
            self.shift = None
            self.spl = CubicSpline(c.params, c.nodes)

    def wrap(self, s):
        if self.closed:
            span = self.t1 - self.t0
            return self.t0 + np.mod(s - self.t0, span)
        return np.clip(s, self.t0, self.t1)

    def __call__(self, s, nu: int = 0):
        s = self.wrap(s)
        val = self.spl(s, nu)
        if self.closed:
            span = self.t1 - self.t0
            if nu == 0:
                val = val + (s - self.t0) / span * self.shift
            elif nu == 1:
                val = val + self.shift / span
        return val


def _refine(ia: _Interp, ib: _Interp, s, t, domain: ChartDomain, reach_a: float, reach_b: float):
    """Gauss-Newton on ``|a(s) - b(t)|^2`` to parameter tolerance ``REFINE_TOL``.

    Parameters stay within ``reach`` of their start; on a single curve this
    keeps the iteration away from the trivial solution ``s = t``.
    """
    s0, t0 = s, t
    for _ in range(50):
        pa, pb = ia(s), ib(t)
        r = domain.displacement(pb, pa)
        J = np.column_stack([ia(s, 1), -ib(t, 1)])
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        nrm = np.max(np.abs(step))
        s = float(np.clip(s + step[0], s0 - reach_a, s0 + reach_a))
        t = float(np.clip(t + step[1], t0 - reach_b, t0 + reach_b))
        if nrm < REFINE_TOL:
            break
    s, t = float(ia.wrap(s)), float(ib.wrap(t))
    pa, pb = ia(s), ib(t)
    return s, t, pa, float(np.linalg.norm(domain.displacement(pb, pa)))


def _reach(params, idx, start: int, closed: bool, span: float) -> float:
    d = np.abs(params[idx] - params[start])
    if closed:
        d = np.minimum(d, span - d)
    return float(np.max(d)) + 2 * float(np.max(np.diff(params)))


def _g_angle(field: MetricField, x, a, b) -> float:
    g = field.g(x)
    ca = abs(a @ g @ b) / np.sqrt((a @ g @ a) * (b @ g @ b))
    return float(np.arccos(np.clip(ca, 0.0, 1.0)))


def _segment_gap(x, b0, b1, dom: ChartDomain):
    """Distance from ``x`` to the chord ``[b0, b1]``."""
    e = dom.displacement(b0, b1)
    r = dom.displacement(b0, x)
    lam = np.clip(np.sum(r * e, axis=-1) / np.maximum(np.sum(e * e, axis=-1), 1e-300), 0.0, 1.0)
    return np.linalg.norm(r - lam[..., None] * e, axis=-1)


def _cluster_seeds(members, A, B, dom: ChartDomain, na: int, nb: int, closed_a: bool, closed_b: bool, k: int = 3):
    """Start pairs at local minima of the node-to-polyline gap along one cluster.

    A shallow-angle cluster can hold more than one crossing; each gets a seed.
    """
    jm = members[:, 1]
    jp = (jm + 1) % nb if closed_b else np.minimum(jm + 1, nb - 1)
    jn = (jm - 1) % nb if closed_b else np.maximum(jm - 1, 0)
    x = A[members[:, 0]]
    gap = np.minimum(_segment_gap(x, B[jm], B[jp], dom), _segment_gap(x, B[jn], B[jm], dom))
    best = {}
    for (i, j), g in zip(members, gap):
        if i not in best or g < best[i][1]:
            best[i] = (j, g)
    seeds = []
    for i, (j, g) in best.items():
        lower = True
        for di in range(-k, k + 1):
            ii = i + di
            if closed_a:
                ii %= na
            other = best.get(ii)
            if di and other is not None and (other[1] < g or (other[1] == g and di < 0)):
                lower = False
                break
        if lower:
            seeds.append((int(i), int(j)))
    return seeds


def _events_from_pairs(
    pairs, ca: CurveDiscrete, cb: CurveDiscrete, field: MetricField, tol: float, same: bool, angle_floor: float
):
    na = len(ca.loop_nodes())
    nb = len(cb.loop_nodes())
    if len(pairs) == 0:
        return []
    pairs = np.asarray(pairs)
    # component labelling with 8-neighbourhood in index space
    key = {tuple(p): k for k, p in enumerate(pairs)}
    rows, cols = [], []
    for k, (i, j) in enumerate(pairs):
        for di, dj in itertools.product((-1, 0, 1), repeat=2):
            ii, jj = i + di, j + dj
            if ca.closed:
                ii %= na
            if cb.closed:
                jj %= nb
            m = key.get((ii, jj))
            if m is not None:
                rows.append(k)
                cols.append(m)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(pairs),) * 2)
    ncomp, lab = connected_components(graph, directed=False)
    ia, ib = _Interp(ca), _Interp(cb)
    A, B = ca.loop_nodes(), cb.loop_nodes()
    dom = field.domain
    events = []
    for comp in range(ncomp):
        members = pairs[lab == comp]
        for i, j in _cluster_seeds(members, A, B, dom, na, nb, ca.closed, cb.closed):
            ra = _reach(ca.params, members[:, 0], i, ca.closed, ca.span)
            rb = _reach(cb.params, members[:, 1], j, cb.closed, cb.span)
            if same:
                gap = abs(ca.params[i] - ca.params[j])
                if ca.closed:
                    gap = min(gap, ca.span - gap)
                ra = rb = min(ra, rb, 0.45 * gap)
            s, t, point, dist = _refine(ia, ib, ca.params[i], cb.params[j], dom, ra, rb)
            if dist > CONTACT_TOL * max(1.0, tol):
                continue  # close approach without a crossing
            ta, tb = ia(s, 1), ib(t, 1)
            ang = _g_angle(field, point, ta, tb)
            if ang <= angle_floor:
                raise NonTransversalContact(f"tangents nearly parallel (angle {ang:.3g}) at {point}")
            events.append(IntersectionEvent(s, t, dom.reduce(point), ang, dist))
    return events


def _merge(events, ca, cb, tol, same):
    """Drop duplicates that refined to the same crossing."""
    out = []
    span_a = ca.span
    span_b = cb.span
    for e in sorted(events, key=lambda e: (e.param_a, e.param_b)):
        dup = False
        for f in out:
            da = abs(e.param_a - f.param_a)
            db = abs(e.param_b - f.param_b)
            if ca.closed:
                da = min(da, span_a - da)
            if cb.closed:
                db = min(db, span_b - db)
            if same:
                xa = abs(e.param_a - f.param_b)
                xb = abs(e.param_b - f.param_a)
                if ca.closed:
                    xa, xb = min(xa, span_a - xa), min(xb, span_a - xb)
                if xa < tol and xb < tol:
                    dup = True
                    break
            if da < tol and db < tol:
                dup = True
                break
        if not dup:
            out.append(e)
    return tuple(out)


def _self_clearance(c: CurveDiscrete, domain: ChartDomain) -> float:
    """Smallest chart distance between nodes at parameter separation at least a quarter span."""
    X = c.loop_nodes()
    n = len(X)
    q = max(1, n // 4)
    best = np.inf
    tree_pts = X
    for i in range(n):
        lo, hi = i + q, i + n - q
        if hi <= lo:
            continue
        idx = np.arange(lo, hi + 1) % n if c.closed else np.arange(lo, min(hi + 1, n))
        if idx.size == 0:
            continue
        d = np.linalg.norm(domain.displacement(tree_pts[i], tree_pts[idx]), axis=-1)
        best = min(best, float(np.min(d)))
    return best


def _detect(ca, cb, field, tol, same, angle_floor, brute):
    A, B = ca.loop_nodes(), cb.loop_nodes()
    finder = brute_close_pairs if brute else hash_close_pairs
    pairs = finder(A, B, tol, field.domain)
    if same and len(pairs):
        # separation measured along the polygon, so slow stretches are not mistaken for crossings
        steps = np.linalg.norm(field.domain.displacement(ca.nodes[:-1], ca.nodes[1:]), axis=-1)
        cum = np.concatenate([[0.0], np.cumsum(steps)])
        sep = np.abs(cum[pairs[:, 0]] - cum[pairs[:, 1]])
        if ca.closed:
            sep = np.minimum(sep, cum[-1] - sep)
        # neighbours along a smooth arc sit at chord ~ arc length; crossings at chord << arc
        chord = np.linalg.norm(field.domain.displacement(A[pairs[:, 0]], A[pairs[:, 1]]), axis=-1)
        far = (sep > 4 * tol) | ((chord < 0.5 * sep) & (sep > 3 * np.max(steps)))
        keep = far & (pairs[:, 0] < pairs[:, 1])
        pairs = pairs[keep]
    return pairs


def double_points(
    c: CurveDiscrete, field: MetricField, tol: float, angle_floor: float = ANGLE_FLOOR, brute: bool = False
) -> IntersectionReport:
    """Self-crossings of a sampled curve as isolated, transversal events."""
    if c.spacing >= tol:
        raise ValueError("node spacing must be smaller than tol")
    pairs = _detect(c, c, field, tol, True, angle_floor, brute)
    events = _events_from_pairs(pairs, c, c, field, tol, True, angle_floor)
    if c.closed:
        t0, span = float(c.params[0]), c.span

        def wrap(u):
            r = np.mod(u - t0, span)
            return t0 + (0.0 if span - r < 1e-12 * span else r)

        events = [IntersectionEvent(wrap(e.param_a), wrap(e.param_b), e.point, e.angle, e.distance) for e in events]
    events = [e if e.param_a <= e.param_b else IntersectionEvent(e.param_b, e.param_a, e.point, e.angle, e.distance) for e in events]
    events = _merge(events, c, c, MERGE_TOL, True)
    clearance = 0.0 if events else _self_clearance(c, field.domain)
    return IntersectionReport(events, clearance, tol)


def pairwise_intersections(
    c: CurveDiscrete,
    d: CurveDiscrete,
    field: MetricField,
    tol: float,
    angle_floor: float = ANGLE_FLOOR,
    brute: bool = False,
) -> IntersectionReport:
    """Crossings between two sampled curves."""
    if c.spacing >= tol or d.spacing >= tol:
        raise ValueError("node spacing must be smaller than tol")
    dom = field.domain
    if hausdorff(dom, c.loop_nodes(), d.loop_nodes()) < tol:
        raise GeometricallyEquivalent("curves have the same trace")
    pairs = _detect(c, d, field, tol, False, angle_floor, brute)
    events = _events_from_pairs(pairs, c, d, field, tol, False, angle_floor)
    events = _merge(events, c, d, MERGE_TOL, False)
    clearance = 0.0 if events else float(np.min(_nearest(dom, c.loop_nodes(), d.loop_nodes())))
    return IntersectionReport(events, clearance, tol)


def min_distance(field: MetricField, a: np.ndarray, b: np.ndarray) -> float:
    return float(np.min(_nearest(field.domain, np.asarray(a), np.asarray(b))))


# --------------------------------------------------------------------------
# plane seeds


def _fibonacci_sphere(count: int) -> np.ndarray:
    k = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * k / count)
    th = np.pi * (1 + 5**0.5) * k
    return np.column_stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)])


def _angle_to_line(g, n, u) -> np.ndarray:
    c = np.abs(np.einsum("...i,ij,j->...", n, g, u)) / np.sqrt(np.einsum("...i,ij,...i->...", n, g, n) * (u @ g @ u))
    return np.arccos(np.clip(c, 0, 1))


def _angle_to_plane(g, n, a, b) -> np.ndarray:
    Q = gram_schmidt(g, [a, b])
    proj = np.einsum("ia,ij,...j->...a", Q, g, n)
    nn = np.sqrt(np.einsum("...i,ij,...j->...", n, g, n))
    c = np.linalg.norm(proj, axis=-1) / nn
    return np.arccos(np.clip(c, 0, 1))


def _check_directions(g, vs, angle_floor):
    for j, k in itertools.combinations(range(len(vs)), 2):
        if _angle_to_line(g, vs[j][None, :], vs[k])[0] <= angle_floor:
            raise SeedSearchFailed(f"directions {j} and {k} are (anti)parallel")


def _project_unit(g, n, v):
    u = n - (v @ g @ n) / (v @ g @ v) * v
    return u / np.sqrt(u @ g @ u)


def choose_plane_seeds(
    p, v_list: Sequence, field: MetricField, dim: Optional[int] = None, angle_floor: float = ANGLE_FLOOR, seed: int = 0
) -> List[np.ndarray]:
    """Unit ``w_j`` orthogonal to ``v_j`` making the planes ``span(v_j, w_j)`` separable.

    In dimension three every ``w_j`` is the projection of one common vector
    ``n``, so all pairwise plane intersections run along ``n``; ``n`` is
    chosen on a sphere grid to stay as far as possible from every ``v_m`` and
    every plane ``span(v_j, v_k)``.  In higher dimension the planes are made
    to meet only at ``p``.
    """
    dim = field.dim if dim is None else int(dim)
    if dim < 3:
        raise DimensionTooLow(f"dimension {dim} < 3")
    p = np.asarray(p, dtype=float)
    vs = [np.asarray(v, dtype=float) for v in v_list]
    g = field.g(p)
    _check_directions(g, vs, angle_floor)
    if dim == 3:
        E = gram_schmidt(g, list(np.eye(3)))
        cands = _fibonacci_sphere(4000) @ E.T
        if len(vs) == 2:
            cross = np.cross(vs[0], vs[1])
            cands = np.vstack([np.linalg.solve(g, cross)[None, :], cands])
        score = np.full(len(cands), np.inf)
        for v in vs:
            score = np.minimum(score, _angle_to_line(g, cands, v))
        for a, b in itertools.combinations(vs, 2):
            score = np.minimum(score, _angle_to_plane(g, cands, a, b))
        best = int(np.argmax(score))
        if score[best] <= angle_floor:
            raise SeedSearchFailed("no admissible common direction for the planes")
        n = cands[best]
        return [_project_unit(g, n, v) for v in vs]
    rng = np.random.default_rng(seed)
    for attempt in range(50):
        ws = []
        for j, v in enumerate(vs):
            seedv = np.eye(dim)[(j + 2) % dim] if attempt == 0 else rng.normal(size=dim)
            if _angle_to_line(g, seedv[None, :], v)[0] <= angle_floor:
                seedv = rng.normal(size=dim)
            ws.append(_project_unit(g, seedv, v))
        if _planes_separate(g, vs, ws):
            return ws
    raise SeedSearchFailed("could not separate the planes after 50 attempts")


def _planes_separate(g, vs, ws, floor: float = 1e-3) -> bool:
    L = np.linalg.cholesky(g)
    for j, k in itertools.combinations(range(len(vs)), 2):
        M = L.T @ np.column_stack([vs[j], ws[j], vs[k], ws[k]])
        sv = np.linalg.svd(M, compute_uv=False)
        if sv[-1] <= floor:
            return False
    return True


# --------------------------------------------------------------------------
# forbidden offsets (dimension three)


@dataclass(frozen=True)
class ForbiddenOffset:
    s_star: float
    t_star: float
    t_on_j: float


def _plane_defect(chart_j: TubularChart, chart_k: TubularChart, s_j: float, t):
    y = np.zeros(np.shape(t) + (chart_j.dim - 1,))
    y[..., 0] = s_j
    x = chart_j.forward(t, y)
    tk, yk = chart_k.inverse(x)
    return tk, yk


def forbidden_offsets(
    chart_j: TubularChart, chart_k: TubularChart, s_budget: float, s_j: Optional[float] = None, samples: int = 161
) -> ForbiddenOffset:
    """Offset of segment ``k`` at which it would meet segment ``j`` displaced by ``s_j``.

    The displaced core line of ``j`` is intersected with the surface of
    chart ``k`` (third tubular coordinate zero); the crossing's chart-``k``
    coordinates give the forbidden offset and its axial parameter.
    """
    if chart_j.dim != 3 or chart_k.dim != 3:
        raise DimensionTooLow("forbidden offsets are defined in dimension three")
    s_j = 0.5 * s_budget if s_j is None else float(s_j)
    eta = min(chart_j.eta, chart_k.eta)
    ts = np.linspace(-eta, eta, samples)
    _, yk = _plane_defect(chart_j, chart_k, s_j, ts)
    h = yk[:, 1]
    scale = max(1.0, float(np.max(np.abs(ts))))
    zero = np.abs(h) <= 1e-14 * scale
    if np.all(zero):
        raise MonotonicityLost("displaced segment lies inside the other surface")
    roots = []
    for i in range(samples - 1):
        if zero[i]:
            roots.append(ts[i])
        elif not zero[i + 1] and h[i] * h[i + 1] < 0:
            f = lambda tt: _plane_defect(chart_j, chart_k, s_j, np.array([tt]))[1][0, 1]
            roots.append(brentq(f, ts[i], ts[i + 1], xtol=1e-15, maxiter=200))
    if zero[-1]:
        roots.append(ts[-1])
    if not roots:
        raise NoIntersectionCurve("displaced segment does not meet the other surface")
    if len(roots) > 1:
        raise MonotonicityLost(f"{len(roots)} crossings of the other surface; curve not a graph over the offset")
    t_root = float(roots[0])
    tk, yk = _plane_defect(chart_j, chart_k, s_j, np.array([t_root]))
    return ForbiddenOffset(float(yk[0, 0]), float(tk[0]), t_root)


def forbidden_offset_line_oracle(p, v_j, w_j, v_k, w_k, s_j: float):
    """Closed-form flat answer: solve ``t v_j + s_j w_j = t' v_k + s w_k``."""
    M = np.column_stack([v_j, -v_k, -w_k])
    t, tp, s = np.linalg.solve(M, -s_j * np.asarray(w_j, dtype=float))
    return ForbiddenOffset(float(s), float(tp), float(t))


# --------------------------------------------------------------------------
# disentangle


@dataclass(frozen=True, eq=False)
class DisentangleResult:
    metric: MetricField
    segments: List[GeodesicSegment]
    originals: List[GeodesicSegment]
    offsets: np.ndarray
    forbidden: Optional[np.ndarray]
    clearance: float
    families: List[PerturbationFamily]
    eps: float
    delta: float
    margin: float

    def as_dict(self) -> dict:
        return {
            "offsets": [float(s) for s in self.offsets],
            "forbidden": None if self.forbidden is None else [[float(x) for x in row] for row in self.forbidden],
            "clearance": float(self.clearance),
            "eps": float(self.eps),
            "delta": float(self.delta),
            "margin": float(self.margin),
            "segment_count": len(self.segments),
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def composite_metric(base: MetricField, families: Sequence[PerturbationFamily], offsets: Sequence[float]) -> MetricField:
    """Base metric with each family's perturbation pasted on its own support."""
    fams = list(families)
    offs = [float(s) for s in offsets]

    def ev(x):
        x = np.asarray(x, dtype=float)
        g = base.g(x)
        flat_x = x.reshape(-1, base.dim)
        gf = g.reshape(-1, base.dim, base.dim)
        for fam, s in zip(fams, offs):
            a = fam.alpha(flat_x)
            act = a != 0
            if np.any(act):
                gf[act] = fam.metric_at(s, flat_x[act])
        return gf.reshape(g.shape)

    return MetricField(base.domain, ev, fd_step=base.fd_step, inj=base.inj, name=f"{base.name}+bumps")


def _u_samples(chart: TubularChart, count: int = 7) -> np.ndarray:
    eta, eps, m = chart.eta, chart.eps, chart.dim - 1
    ts = np.linspace(eta + 0.01 * eps, eta + 5.99 * eps, count)
    ts = np.concatenate([ts, -ts])
    ring = [np.zeros(m)]
    for a in range(m):
        for sg in (-1, 1):
            e = np.zeros(m)
            e[a] = sg * 0.99 * eps
            ring.append(e)
    ring = np.array(ring)
    T = np.repeat(ts, len(ring))
    Y = np.tile(ring, (ts.size, 1))
    return chart.forward(T, Y)


def _supports_disjoint(charts: Sequence[TubularChart]) -> bool:
    samples = [_u_samples(c) for c in charts]
    for j, k in itertools.permutations(range(len(charts)), 2):
        if np.any(in_U(charts[k], samples[j])):
            return False
    return True


def _select_offsets(N: int, s_budget: float, forb) -> Tuple[np.ndarray, float]:
    """Pick grid offsets maximising the smallest distance to the forbidden values."""
    cand = np.arange(1, 2 * N + 2) * s_budget / (2 * N + 2)
    C = len(cand)

    def margin(choice):
        worst = np.inf
        for j in range(N):
            for k in range(N):
                if j != k:
                    worst = min(worst, abs(cand[choice[k]] - forb[j][k][choice[j]]))
        return worst

    if C**N <= 20000:
        best, best_m = None, -np.inf
        for choice in itertools.product(range(C), repeat=N):
            m = margin(choice)
            if m > best_m:
                best, best_m = choice, m
    else:
        best = [C // 2] + [0] * (N - 1)
        for k in range(1, N):
            scores = []
            for c in range(C):
                trial = list(best)
                trial[k] = c
                sub = trial[: k + 1]
                worst = np.inf
                for a in range(k + 1):
                    for b in range(k + 1):
                        if a != b:
                            worst = min(worst, abs(cand[sub[b]] - forb[a][b][sub[a]]))
                scores.append(worst)
            best[k] = int(np.argmax(scores))
        best = tuple(best)
        best_m = margin(best)
    return cand[list(best)], float(best_m)


def disentangle(
    field: MetricField,
    p,
    segments: Sequence[GeodesicSegment],
    eta: float,
    eps: float,
    s_budget: float,
    delta: Optional[float] = None,
    nodes: int = 4001,
    angle_floor: float = ANGLE_FLOOR,
    residuals: bool = False,
) -> DisentangleResult:
    """Perturb the metric near ``p`` so the given segments through ``p`` stop meeting.

    Each segment gets its own bump supported in its ``U`` set; in dimension
    three the offsets are picked from a grid away from the forbidden values.
    """
    dim = field.dim
    if dim < 3:
        raise DimensionTooLow(f"dimension {dim} < 3")
    if eta >= field.inj / 3:
        raise BoundViolation(f"eta={eta} must stay below inj/3")
    p = np.asarray(p, dtype=float)
    vs = []
    for seg in segments:
        x0, v0 = seg.initial
        if np.max(np.abs(field.domain.displacement(x0, p))) > 1e-9:
            raise ValueError("every segment must pass through p at parameter 0")
        g = field.g(p)
        vs.append(np.asarray(v0, dtype=float) / np.sqrt(v0 @ g @ v0))
    ws = choose_plane_seeds(p, vs, field, dim, angle_floor)
    delta = 0.49 * eps if delta is None else float(delta)
    s_budget = min(float(s_budget), delta)
    charts = None
    for _ in range(7):
        try:
            charts = [build_tubular_chart(field, p, v, w, eta, eps) for v, w in zip(vs, ws)]
            if _supports_disjoint(charts):
                break
        except BoundViolation:
            pass
        charts = None
        eps *= 0.5
        delta = min(delta, 0.49 * eps)
        s_budget = min(s_budget, delta)
    if charts is None:
        raise EpsilonExhausted("U sets still overlap after 6 halvings of eps")
    N = len(vs)
    families = [make_family(c, delta, s_max=s_budget, nodes=nodes) for c in charts]
    forbidden = None
    if dim == 3 and N >= 2:
        cand = np.arange(1, 2 * N + 2) * s_budget / (2 * N + 2)
        forb = [[None] * N for _ in range(N)]
        for j, k in itertools.permutations(range(N), 2):
            forb[j][k] = np.array([forbidden_offsets(charts[j], charts[k], s_budget, s).s_star for s in cand])
        offsets, margin = _select_offsets(N, s_budget, forb)
        if margin < s_budget / (8 * N**2):
            raise OffsetSelectionFailed(f"best margin {margin:.3g} below s_budget/(8N^2)")
        idx = [int(np.argmin(np.abs(cand - s))) for s in offsets]
        forbidden = np.full((N, N), np.nan)
        for j, k in itertools.permutations(range(N), 2):
            forbidden[j, k] = forb[j][k][idx[j]]
    else:
        offsets = np.full(N, 0.5 * s_budget)
        margin = float("inf")
    metric = composite_metric(field, families, offsets)
    displaced, originals = [], []
    for fam, s in zip(families, offsets):
        originals.append(fam.base_curve() if residuals else _bare(fam))
        displaced.append(fam.displaced(float(s), with_residual=residuals))
    clearance = np.inf
    for a, b in itertools.combinations(range(N), 2):
        clearance = min(clearance, min_distance(field, displaced[a].nodes, displaced[b].nodes))
    return DisentangleResult(
        metric, displaced, originals, np.asarray(offsets), forbidden, float(clearance), families, eps, delta, margin
    )


def _bare(fam: PerturbationFamily) -> GeodesicSegment:
    params = fam.axis_params()
    nodes = fam.chart.forward(params, np.zeros((params.size, fam.dim - 1)))
    return GeodesicSegment(CurveDiscrete(nodes, params), (fam.chart.p.copy(), fam.chart.v.copy()), float("nan"))
