"""Closed geodesics on periodic charts, their linearized return maps, and crossing removal.

Loops are lifts ``X(u), u in [0, 1]`` with ``X(1) = X(0) + S`` where ``S`` is
the lattice shift of the requested homotopy class.  A Sobolev-preconditioned
descent of the discrete energy is followed by Gauss-Newton shooting on the
initial state.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .bump_perturb import length_under
from .chart_metric import CurveDiscrete, MetricField, christoffel, gram_schmidt, metric_deriv, norm_sq
from .errors import (
    BallOverlapUnresolvable,
    DimensionTooLow,
    DomainEscape,
    FramePropagationFailed,
    NoConvergence,
)
from .geodesic_flow import DEFAULT_STEP, GeodesicSegment, make_segment, rk4_flow, rk4_variational
from .intersect import composite_metric, disentangle, double_points, hausdorff, pairwise_intersections

TOL_EIG = 1e-4
CLOSURE_TOL = 1e-6
SHOOT_TOL = 1e-9
# RK4 step for closed loops; residuals stay near 1e-7 on the shipped surfaces
LOOP_STEP = 0.02


@dataclass(frozen=True, eq=False)
class ClosedGeodesic:
    segment: GeodesicSegment
    length: float
    prime: bool
    multiplicity: int
    homotopy_class: tuple
    closure_gap: float

    @property
    def curve(self) -> CurveDiscrete:
        return self.segment.curve

    @property
    def residual(self) -> float:
        return self.segment.residual_max

    @property
    def initial(self):
        return self.segment.initial


@dataclass(frozen=True)
class PoincareData:
    monodromy: np.ndarray
    eigenvalues: np.ndarray
    nondegenerate: bool
    determinant: float
    tol_eig: float = TOL_EIG


# --------------------------------------------------------------------------
# loop space


def lattice_shift(field: MetricField, homotopy_class) -> np.ndarray:
    """Translation ``S`` closing a loop of the given class (periodic axes only)."""
    k = np.asarray(homotopy_class, dtype=float)
    dom = field.domain
    if k.shape != (field.dim,):
        raise ValueError("homotopy class needs one entry per coordinate")
    per = dom.periods
    if np.any((k != 0) & np.isnan(per)):
        raise ValueError("class winds around a non-periodic axis")
    if not np.any(k != 0):
        raise ValueError("homotopy class must be nonzero")
    return np.where(np.isnan(per), 0.0, k * np.nan_to_num(per))


def discrete_energy(field: MetricField, X: np.ndarray, S: np.ndarray) -> float:
    """``sum_i 1/2 g(m_i)(d_i, d_i) / h`` over the closed polygon ``X`` (``N`` nodes, ``h = 1/N``)."""
    N = len(X)
    d = np.roll(X, -1, axis=0) - X
    d[-1] += S
    m = X + 0.5 * d
    return float(0.5 * N * np.sum(norm_sq(field, m, d)))


def energy_gradient(field: MetricField, X: np.ndarray, S: np.ndarray) -> np.ndarray:
    N = len(X)
    d = np.roll(X, -1, axis=0) - X
    d[-1] += S
    m = X + 0.5 * d
    g = field.g(m)
    dg = metric_deriv(field, m)
    gd = np.einsum("...ij,...j->...i", g, d)
    quad = 0.25 * np.einsum("...ijk,...i,...j->...k", dg, d, d)
    # d/dX_i of segment i (start) and of segment i-1 (end)
    return N * ((quad - gd) + np.roll(quad + gd, 1, axis=0))


def _precondition(grad: np.ndarray) -> np.ndarray:
    """Inverse of the discrete ``H^1`` operator ``N (2 - 2 cos) + 1/N`` applied mode-wise."""
    N = len(grad)
    w = 2 * np.pi * np.fft.fftfreq(N)
    sym = N * (2 - 2 * np.cos(w)) + 1.0 / N
    return np.real(np.fft.ifft(np.fft.fft(grad, axis=0) / sym[:, None], axis=0))


@dataclass
class DescentLog:
    energies: List[float] = dc_field(default_factory=list)
    grad_norms: List[float] = dc_field(default_factory=list)


def descend_loop(field, X, S, max_iter: int = 400, gtol: float = 1e-10, log: Optional[DescentLog] = None):
    """Armijo descent of :func:`discrete_energy` along the preconditioned gradient."""
    X = np.array(X, dtype=float)
    E = discrete_energy(field, X, S)
    log = DescentLog() if log is None else log
    log.energies.append(E)
    for _ in range(max_iter):
        G = energy_gradient(field, X, S)
        D = _precondition(G)
        slope = float(np.sum(G * D))
        log.grad_norms.append(math.sqrt(max(slope, 0.0)))
        if slope <= gtol**2:
            break
        step = 1.0
        while step > 1e-12:
            trial = X - step * D
            if np.all(field.domain.contains(trial)):
                Et = discrete_energy(field, trial, S)
                if Et <= E - 1e-4 * step * slope:
                    break
            step *= 0.5
        else:
            break
        X, E = trial, Et
        log.energies.append(E)
    return X, log


def _flow_map(field: MetricField, x0, v0, nsteps: int):
    if field.flat:
        n = field.dim
        J = np.zeros((2 * n, 2 * n))
        J[:n, :n] = np.eye(n)
        J[:n, n:] = np.eye(n)
        J[n:, n:] = np.eye(n)
        return x0 + v0, v0.copy(), J
    n = field.dim
    Jx = np.hstack([np.eye(n), np.zeros((n, n))])
    Jv = np.hstack([np.zeros((n, n)), np.eye(n)])
    x, v, Jx, Jv = rk4_variational(field, x0, v0, 1.0, nsteps, Jx, Jv)
    return x, v, np.vstack([Jx, Jv])


def _nsteps(field: MetricField, x0, v0, step: float) -> int:
    L = math.sqrt(float(norm_sq(field, x0, v0)))
    return max(64, int(math.ceil(L / step)))


def shoot_closed(field: MetricField, x0, v0, S, step: float = LOOP_STEP, max_iter: int = 40, tol: float = SHOOT_TOL):
    """Gauss-Newton on ``(x(1) - x0 - S, v(1) - v0) = 0`` for the flow over unit parameter time."""
    n = field.dim
    x0 = np.array(x0, dtype=float)
    v0 = np.array(v0, dtype=float)
    ns = _nsteps(field, x0, v0, step)
    best = np.inf
    for _ in range(max_iter):
        x1, v1, J = _flow_map(field, x0, v0, ns)
        F = np.concatenate([field.domain.displacement(x0 + S, x1), v1 - v0])
        prev, best = best, float(np.max(np.abs(F)))
        if best < tol or (best < 10 * tol and best > 0.5 * prev):
            return x0, v0, best
        A = J - np.eye(2 * n)
        dz = np.linalg.lstsq(A, -F, rcond=1e-10)[0]
        lim = 0.1 * max(1.0, float(np.linalg.norm(v0)))
        nz = float(np.linalg.norm(dz))
        if nz > lim:
            dz *= lim / nz
        x0 = x0 + dz[:n]
        v0 = v0 + dz[n:]
    if best < 10 * tol:
        return x0, v0, best
    raise NoConvergence(f"shooting stalled at defect {best:.3g}")


def _sample_loop(field, x0, v0, S, k, nodes: int, step: float):
    L = math.sqrt(float(norm_sq(field, x0, v0)))
    u0 = v0 / L
    sub = max(1, int(math.ceil(L / nodes / step)))
    xs, vs = rk4_flow(field, x0, u0, L, nodes * sub, record=True)
    X, V = xs[::sub], vs[::sub]
    gap = max(
        float(np.max(np.abs(field.domain.displacement(x0 + S, X[-1])))),
        float(np.max(np.abs(V[-1] - u0))),
    )
    params = np.linspace(0.0, L, nodes + 1)
    seg = make_segment(field, X, params, initial=(x0.copy(), u0.copy()), closed=True)
    return seg, L, gap


def multiplicity_of(field: MetricField, x0, u0, L: float, S, k, step: float = LOOP_STEP) -> int:
    """Largest ``m`` such that the loop already closes after ``L / m``."""
    ks = [abs(int(round(c))) for c in k if round(c) != 0]
    g = 0
    for c in ks:
        g = math.gcd(g, c)
    for m in sorted((d for d in range(2, g + 1) if g % d == 0), reverse=True):
        ns = max(64, int(math.ceil(L / m / step)))
        x, v = rk4_flow(field, x0, u0, L / m, ns)
        gap = max(
            float(np.max(np.abs(field.domain.displacement(x0 + S / m, x)))),
            float(np.max(np.abs(v - u0))),
        )
        if gap < CLOSURE_TOL:
            return m
    return 1


def _seed_loop(seed, N: int, S) -> np.ndarray:
    seed = np.asarray(seed, dtype=float)
    if seed.ndim == 1:
        u = np.arange(N)[:, None] / N
        return seed + u * S
    return seed


def find_closed_geodesics(
    field: MetricField,
    homotopy_class,
    init_count: int = 4,
    seeds: Optional[Sequence] = None,
    nodes: int = 256,
    out_nodes: int = 1024,
    seed: int = 0,
    descent: Optional[bool] = None,
    step: float = LOOP_STEP,
    failures: Optional[list] = None,
) -> List[ClosedGeodesic]:
    """Closed geodesics in a homotopy class, deduplicated by trace.

    On fully periodic charts random starts are relaxed by energy descent and
    then shot to closure.  Otherwise ``seeds`` (base points or full loops)
    are required and go straight to shooting, since the targets there are
    typically saddle points of the energy.
    """
    S = lattice_shift(field, homotopy_class)
    k = tuple(int(round(c)) for c in homotopy_class)
    dom = field.domain
    full = bool(np.all(~np.isnan(dom.periods)))
    if seeds is None:
        if not full:
            raise ValueError("non-periodic charts need explicit seeds")
        rng = np.random.default_rng(seed)
        seeds = []
        u = np.arange(nodes)[:, None] / nodes
        for _ in range(init_count):
            base = dom.lower + rng.random(field.dim) * np.nan_to_num(dom.periods)
            wig = sum(rng.normal(scale=0.05, size=field.dim) * np.sin(2 * np.pi * (j + 1) * u + rng.random()) for j in range(3))
            seeds.append(base + u * S + wig)
    descent = full if descent is None else descent
    found: List[ClosedGeodesic] = []
    for sd in seeds:
        X = _seed_loop(sd, nodes, S)
        try:
            if descent:
                X, _ = descend_loop(field, X, S)
            N = len(X)
            v0 = (X[1] - X[-1] + S) * N / 2 if N > 2 else S
            x0, v0, _ = shoot_closed(field, X[0], v0, S, step=step)
            seg, L, gap = _sample_loop(field, x0, v0, S, k, out_nodes, step)
        except (NoConvergence, DomainEscape) as exc:
            if failures is not None:
                failures.append(str(exc))
            continue
        m = multiplicity_of(field, x0, v0 / L, L, S, k, step)
        cg = ClosedGeodesic(seg, L, m == 1, m, k, gap)
        if not any(_same_trace(field, cg, other) for other in found):
            found.append(cg)
    return found


def _same_trace(field: MetricField, a: ClosedGeodesic, b: ClosedGeodesic) -> bool:
    tol = 10 * max(a.curve.spacing, b.curve.spacing)
    return hausdorff(field.domain, a.curve.loop_nodes(), b.curve.loop_nodes()) < tol


def dedup(field: MetricField, loops: Sequence[ClosedGeodesic]) -> List[ClosedGeodesic]:
    """Keep one loop per trace (orientation and start point ignored)."""
    out: List[ClosedGeodesic] = []
    for c in loops:
        if not any(_same_trace(field, c, o) and abs(c.length - o.length) < 1e-6 * max(1.0, c.length) for o in out):
            out.append(c)
    return out


def iterate(field: MetricField, cg: ClosedGeodesic, m: int, out_nodes: Optional[int] = None) -> ClosedGeodesic:
    """The ``m``-fold traversal of ``cg``."""
    x0, u0 = cg.initial
    S = lattice_shift(field, cg.homotopy_class)
    n_out = (len(cg.curve.params) - 1) * m if out_nodes is None else out_nodes
    seg, L, gap = _sample_loop(field, x0, u0 * cg.length * m, S * m, None, n_out, LOOP_STEP)
    k = tuple(c * m for c in cg.homotopy_class)
    return ClosedGeodesic(seg, L, False, cg.multiplicity * m, k, gap)


# --------------------------------------------------------------------------
# return map


def normal_frame(field: MetricField, x, u) -> np.ndarray:
    g = field.g(x)
    n = field.dim
    Q = gram_schmidt(g, [u] + list(np.eye(n)))
    if Q.shape[1] != n:
        raise FramePropagationFailed("could not complete an orthonormal normal frame")
    return Q[:, 1:]


def linearized_poincare(
    field: MetricField, cg: ClosedGeodesic, tol_eig: float = TOL_EIG, laps: int = 1, step: float = LOOP_STEP
) -> PoincareData:
    """Jacobi-field monodromy over ``laps`` traversals in an orthonormal normal frame.

    Columns start as ``(J, DJ) = (E_a, 0)`` and ``(0, E_a)``; covariant
    derivatives are converted to coordinate velocities with the Christoffel
    symbols at both ends.
    """
    x0, u0 = (np.asarray(a, dtype=float) for a in cg.initial)
    u0 = u0 / math.sqrt(float(norm_sq(field, x0, u0)))
    E = normal_frame(field, x0, u0)
    n, m = field.dim, field.dim - 1
    gam0 = christoffel(field, x0)
    corr0 = np.einsum("kij,i,ja->ka", gam0, u0, E)
    Jx = np.hstack([E, np.zeros((n, m))])
    Jv = np.hstack([-corr0, E])
    T = cg.length * laps
    ns = max(64, int(math.ceil(T / step)))
    x1, v1, Jx1, Jv1 = rk4_variational(field, x0, u0, T, ns, Jx, Jv)
    if not (np.all(np.isfinite(Jx1)) and np.all(np.isfinite(Jv1))):
        raise FramePropagationFailed("Jacobi integration produced non-finite values")
    g1 = field.g(x1)
    cov = Jv1 + np.einsum("kij,i,ja->ka", christoffel(field, x1), v1, Jx1)
    P = np.vstack([E.T @ g1 @ Jx1, E.T @ g1 @ cov])
    ev = np.linalg.eigvals(P)
    nondeg = bool(np.all(np.abs(ev - 1.0) > tol_eig))
    return PoincareData(P, ev, nondeg, float(np.linalg.det(P)), tol_eig)


# --------------------------------------------------------------------------
# audits


@dataclass(frozen=True)
class AuditTarget:
    field: MetricField
    homotopy_class: tuple
    seeds: Optional[list] = None
    label: str = ""


@dataclass(frozen=True)
class AuditEntry:
    label: str
    length: float
    prime: bool
    multiplicity: int
    nondegenerate: bool
    eigenvalues: np.ndarray
    geometric_class: int
    loop: ClosedGeodesic
    trace_csv_path: Optional[str] = None

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "length": float(self.length),
            "prime": bool(self.prime),
            "multiplicity": int(self.multiplicity),
            "nondegenerate": bool(self.nondegenerate),
            "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
            "geometric_class": int(self.geometric_class),
            "trace_csv_path": self.trace_csv_path,
        }


@dataclass(frozen=True)
class BumpyReport:
    length_bound: float
    classes: List[AuditEntry]
    coverage: str

    @property
    def class_count(self) -> int:
        return len({e.geometric_class for e in self.classes})

    @property
    def bumpy(self) -> bool:
        return all(e.nondegenerate for e in self.classes)

    def as_dict(self) -> dict:
        return {
            "length_bound": float(self.length_bound),
            "class_count": self.class_count,
            "bumpy": self.bumpy,
            "coverage": self.coverage,
            "classes": [e.as_dict() for e in self.classes],
        }

    def write_traces(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, e in enumerate(self.classes):
            path = out / f"trace_{i:03d}.csv"
            e.loop.segment.to_csv(path)
            object.__setattr__(e, "trace_csv_path", path.name)


def torus_targets(field: MetricField, a: float) -> List[AuditTarget]:
    """Primitive classes (up to sign) whose straight representatives have length at most ``a``."""
    P = np.nan_to_num(field.domain.periods)
    reach = [int(math.floor(a / p)) for p in P]
    out = []
    for k in itertools.product(*(range(-r, r + 1) for r in reach)):
        if not any(k):
            continue
        first = next(c for c in k if c != 0)
        if first < 0:
            continue
        g = 0
        for c in k:
            g = math.gcd(g, abs(c))
        if g != 1:
            continue
        if float(np.linalg.norm(np.array(k) * P)) <= a + 1e-12:
            out.append(AuditTarget(field, tuple(k), None, f"class{k}"))
    return out


def ellipsoid_targets(axes=(1.0, 1.1, 1.3)) -> List[AuditTarget]:
    """One target per principal section; each uses the chart whose equator it is."""
    from .scenarios import ellipsoid_chart

    out = []
    for ax in range(3):
        f = ellipsoid_chart(axes, polar_axis=ax)
        seed = np.array([np.pi / 2 + 0.02, 0.1])
        out.append(AuditTarget(f, (0, 1), [seed], f"equator-normal-to-axis-{ax}"))
    return out


def bumpy_audit(
    targets: Sequence[AuditTarget], a: float, out_nodes: int = 1024, seed: int = 0, tol_eig: float = TOL_EIG
) -> BumpyReport:
    """Find closed geodesics of length at most ``a`` and tag each by its return map.

    Every prime loop and its iterates up to length ``a`` form one geometric
    class.  Coverage is limited to the listed targets.
    """
    entries: List[AuditEntry] = []
    gid = 0
    for tgt in targets:
        loops = find_closed_geodesics(tgt.field, tgt.homotopy_class, init_count=1, seeds=tgt.seeds, out_nodes=out_nodes, seed=seed)
        for cg in loops:
            if cg.length > a + 1e-9:
                continue
            base = linearized_poincare(tgt.field, cg, tol_eig)
            reps = int(math.floor(a / cg.length + 1e-9))
            for m in range(1, reps + 1):
                loop = cg if m == 1 else iterate(tgt.field, cg, m)
                Pm = np.linalg.matrix_power(base.monodromy, m)
                ev = np.linalg.eigvals(Pm)
                nondeg = bool(np.all(np.abs(ev - 1.0) > tol_eig))
                entries.append(
                    AuditEntry(tgt.label, loop.length, m == 1 and cg.prime, loop.multiplicity, nondeg, ev, gid, loop)
                )
            gid += 1
    coverage = f"{len(targets)} target classes searched; only loops found from their seeds are audited"
    return BumpyReport(float(a), entries, coverage)


# --------------------------------------------------------------------------
# crossing removal on a family of loops


@dataclass(frozen=True)
class CrossingPoint:
    point: np.ndarray
    members: list  # (loop index, parameter)


@dataclass(frozen=True, eq=False)
class PipelineReport:
    before_events: int
    after_events: int
    crossings: List[CrossingPoint]
    eta: float
    eps: float
    delta: float
    s_budget: float
    lengths_before: np.ndarray
    lengths_after: np.ndarray
    clearance_after: float
    metric: MetricField
    loops_before: List[CurveDiscrete]
    loops_after: List[CurveDiscrete]
    halvings: int

    @property
    def max_length_change(self) -> float:
        if len(self.lengths_before) == 0:
            return 0.0
        return float(np.max(np.abs(self.lengths_after - self.lengths_before)))

    def as_dict(self) -> dict:
        return {
            "before_events": int(self.before_events),
            "after_events": int(self.after_events),
            "crossings": [
                {"point": [float(c) for c in cp.point], "members": [[int(i), float(t)] for i, t in cp.members]}
                for cp in self.crossings
            ],
            "eta": float(self.eta),
            "eps": float(self.eps),
            "delta": float(self.delta),
            "s_budget": float(self.s_budget),
            "lengths_before": [float(x) for x in self.lengths_before],
            "lengths_after": [float(x) for x in self.lengths_after],
            "max_length_change": self.max_length_change,
            "clearance_after": float(self.clearance_after),
            "halvings": int(self.halvings),
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _audit_events(field, curves, tol):
    events = []
    for i, c in enumerate(curves):
        for e in double_points(c, field, tol).events:
            events.append((e.point, [(i, e.param_a), (i, e.param_b)]))
    clearance = np.inf
    for i, j in itertools.combinations(range(len(curves)), 2):
        rep = pairwise_intersections(curves[i], curves[j], field, tol)
        for e in rep.events:
            events.append((e.point, [(i, e.param_a), (j, e.param_b)]))
        if not rep.events:
            clearance = min(clearance, rep.clearance)
    return events, clearance


def _group_points(field, events, radius):
    groups: List[CrossingPoint] = []
    for pt, members in events:
        for gp in groups:
            if np.linalg.norm(field.domain.displacement(gp.point, pt)) < radius:
                for mem in members:
                    if not any(mem[0] == o[0] and abs(mem[1] - o[1]) < radius for o in gp.members):
                        gp.members.append(mem)
                break
        else:
            groups.append(CrossingPoint(np.asarray(pt, dtype=float), list(members)))
    return groups


def _balls_disjoint(field, pts, eta) -> bool:
    for a, b in itertools.combinations(pts, 2):
        if np.linalg.norm(field.domain.displacement(a, b)) < 4 * eta:
            return False
    return True


def _local_segment(field, loop: ClosedGeodesic, param: float, eta: float, p):
    x0, u0 = loop.initial
    ns = max(16, int(math.ceil(abs(param) / DEFAULT_STEP)))
    x, u = rk4_flow(field, x0, u0, param, ns) if param != 0 else (x0.copy(), u0.copy())
    u = u / math.sqrt(float(norm_sq(field, x, u)))
    t = np.linspace(-2 * eta, 2 * eta, 41)
    xs_f, _ = rk4_flow(field, x, u, 2 * eta, 20, record=True)
    xs_b, _ = rk4_flow(field, x, -u, 2 * eta, 20, record=True)
    nodes = np.vstack([xs_b[::-1], xs_f[1:]])
    shift = field.domain.displacement(x, p)
    return GeodesicSegment(CurveDiscrete(nodes + shift, t), (np.asarray(p, dtype=float), u), float("nan"))


def _wrap_centered(u, span):
    return (u + 0.5 * span) % span - 0.5 * span


def crossing_removal_pipeline(
    field: MetricField,
    loops: Sequence[ClosedGeodesic],
    a: float,
    eta: float,
    eps: float,
    s_budget: float,
    delta: Optional[float] = None,
    tol: float = 2e-3,
    max_halvings: int = 6,
) -> PipelineReport:
    """Detect crossings among loops of length at most ``a``, remove them locally, re-audit.

    Each crossing point gets disjoint bumps on the loops through it; the
    displaced loops are the originals plus the bump displacement, so they
    coincide with the originals away from the ``2 eta`` balls.
    """
    loops = [c for c in loops if c.length <= a + 1e-9]
    curves = [c.curve for c in loops]
    before, _ = _audit_events(field, curves, tol)
    delta = 0.45 * eps if delta is None else float(delta)
    halvings = 0
    groups = _group_points(field, before, 10 * tol)
    pts = [g.point for g in groups]
    lengths_before = np.array([length_under(field, c.nodes, c.params) for c in curves])
    if not groups:
        return PipelineReport(
            0, 0, [], eta, eps, delta, s_budget, lengths_before, lengths_before.copy(),
            _audit_events(field, curves, tol)[1], field, curves, curves, 0,
        )
    if field.dim < 3:
        raise DimensionTooLow("crossings can only be removed in dimension three or more")
    while not _balls_disjoint(field, pts, eta):
        if halvings == max_halvings:
            raise BallOverlapUnresolvable("2 eta balls still overlap after halving")
        halvings += 1
        eta, eps, delta, s_budget = eta / 2, eps / 2, delta / 2, s_budget / 2
    families, offsets = [], []
    displaced = [c.nodes.copy() for c in curves]
    for grp in groups:
        segs = [_local_segment(field, loops[i], t, eta, grp.point) for i, t in grp.members]
        res = disentangle(field, grp.point, segs, eta, eps, s_budget, delta=delta)
        families.extend(res.families)
        offsets.extend(res.offsets)
        for (i, t), fam, s in zip(grp.members, res.families, res.offsets):
            c = curves[i]
            d = _wrap_centered(c.params - t, c.span)
            near = np.abs(d) <= 2 * fam.chart.eta
            if np.any(near):
                dt = d[near]
                moved = fam.displaced_nodes(float(s), dt)
                base = fam.chart.forward(dt, np.zeros((dt.size, field.dim - 1)))
                displaced[i][near] += moved - base
    metric = composite_metric(field, families, offsets)
    after_curves = [CurveDiscrete(X, c.params, closed=True) for X, c in zip(displaced, curves)]
    after, clearance = _audit_events(metric, after_curves, tol)
    lengths_after = np.array([length_under(metric, c.nodes, c.params) for c in after_curves])
    return PipelineReport(
        len(before), len(after), groups, eta, eps, delta, s_budget, lengths_before, lengths_after,
        clearance, metric, curves, after_curves, halvings,
    )


def torus_cross_loops(field: MetricField, out_nodes: int = 2048) -> List[ClosedGeodesic]:
    """Loops of classes ``(1,0,0)`` and ``(0,1,0)`` meeting once transversally."""
    P = np.nan_to_num(field.domain.periods)
    lo = field.domain.lower
    first = find_closed_geodesics(field, (1, 0, 0), seeds=[lo + np.array([0.0, 0.55, 0.5]) * P], out_nodes=out_nodes, descent=False)
    second = find_closed_geodesics(field, (0, 1, 0), seeds=[lo + np.array([0.35, 0.0, 0.5]) * P], out_nodes=out_nodes, descent=False)
    return first + second
