"""Riemannian and reversible Finsler metrics on a single coordinate chart.

Every array-valued function here broadcasts over leading axes: a point is an
array of shape ``(..., n)`` and a metric value has shape ``(..., n, n)``.
Derivative arrays follow the index order ``dg[..., i, j, k] = d g_ij / d x_k``
and ``gamma[..., k, i, j] = Gamma^k_ij``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.integrate import simpson

from .errors import DegenerateMetric, DomainError, NonSmoothAtVector, SingularMetric

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ChartDomain:
    """Coordinate box with optional per-axis periods (flat-torus charts)."""

    dim: int
    box: tuple
    periodic: Optional[tuple] = None

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("chart dimension must be at least 2")
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        if len(box) != self.dim:
            raise ValueError("box needs one interval per axis")
        if any(hi <= lo for lo, hi in box):
            raise ValueError("box intervals must be nonempty")
        periodic = self.periodic if self.periodic is not None else (None,) * self.dim
        if len(periodic) != self.dim:
            raise ValueError("periodic needs one entry per axis")
        periodic = tuple(None if p is None else float(p) for p in periodic)
        if any(p is not None and p <= 0 for p in periodic):
            raise ValueError("periods must be positive")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "periodic", periodic)
        object.__setattr__(self, "_lo", np.array([b[0] for b in box]))
        object.__setattr__(self, "_hi", np.array([b[1] for b in box]))
        object.__setattr__(
            self, "_period", np.array([np.nan if p is None else p for p in periodic])
        )
        object.__setattr__(self, "_pmask", ~np.isnan(self._period))

    @property
    def lower(self) -> np.ndarray:
        return self._lo

    @property
    def upper(self) -> np.ndarray:
        return self._hi

    @property
    def periods(self) -> np.ndarray:
        """Per-axis periods, NaN for non-periodic axes."""
        return self._period

    @property
    def is_periodic(self) -> bool:
        return bool(self._pmask.any())

    def reduce(self, x) -> np.ndarray:
        """Wrap periodic coordinates into ``[lo, lo + period)``."""
        x = np.asarray(x, dtype=float)
        if not self._pmask.any():
            return x
        m = self._pmask
        out = x.copy()
        r = np.mod(x[..., m] - self._lo[m], self._period[m])
        # mod of a tiny negative number rounds up to the full period
        r = np.where(r >= self._period[m], 0.0, r)
        out[..., m] = self._lo[m] + r
        return out

    def displacement(self, a, b) -> np.ndarray:
        """``b - a`` using the minimal image on periodic axes."""
        d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
        if not self._pmask.any():
            return d
        m = self._pmask
        d = d.copy()
        P = self._period[m]
        d[..., m] = d[..., m] - P * np.round(d[..., m] / P)
        return d

    def lift_near(self, x, ref) -> np.ndarray:
        """Representative of ``x`` closest to ``ref`` on the covering space."""
        return np.asarray(ref, dtype=float) + self.displacement(ref, x)

    def contains(self, x, margin: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        free = ~self._pmask
        inside = (x[..., free] >= self._lo[free] + margin) & (
            x[..., free] <= self._hi[free] - margin
        )
        return np.all(inside, axis=-1)


@dataclass(frozen=True)
class MetricField:
    """A Riemannian metric ``x -> g(x)`` on one chart.

    ``eval`` must broadcast over leading axes.  ``deriv`` (first derivatives)
    and ``deriv2`` (second derivatives, ``[..., i, j, k, l]``) are optional;
    central differences with ``fd_step`` are used where they are missing.
    ``inj`` is the declared injectivity bound of the scenario and ``flat``
    marks constant metrics, which enables exact affine shortcuts elsewhere.
    """

    domain: ChartDomain
    eval: ArrayFn
    deriv: Optional[ArrayFn] = None
    deriv2: Optional[ArrayFn] = None
    fd_step: float = 1e-5
    inj: float = np.inf
    flat: bool = False
    name: str = ""

    @property
    def dim(self) -> int:
        return self.domain.dim

    def g(self, x) -> np.ndarray:
        """Unchecked evaluation after periodic reduction."""
        return self.eval(self.domain.reduce(x))


@dataclass(frozen=True)
class FinslerField:
    """Reversible Finsler norm ``f(x, v)``; broadcasts like :class:`MetricField`."""

    domain: ChartDomain
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = ""

    @property
    def dim(self) -> int:
        return self.domain.dim

    def norm(self, x, v) -> np.ndarray:
        return self.f(self.domain.reduce(x), np.asarray(v, dtype=float))


def riemannian_square(field: MetricField) -> FinslerField:
    """The Finsler norm ``sqrt(g(v, v))`` of a Riemannian metric."""

    def f(x, v):
        g = field.eval(x)
        return np.sqrt(np.einsum("...i,...ij,...j->...", v, g, v))

    return FinslerField(field.domain, f, name=f"sqrt({field.name})")


@dataclass(frozen=True)
class CurveDiscrete:
    """Sampled curve.  A closed curve repeats its first node (up to a period shift) last."""

    nodes: np.ndarray
    params: np.ndarray
    closed: bool = False

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        params = np.asarray(self.params, dtype=float)
        if nodes.shape[0] < 3:
            raise ValueError("a curve needs at least 3 nodes")
        if params.shape != (nodes.shape[0],):
            raise ValueError("params must match the node count")
        if np.any(np.diff(params) <= 0):
            raise ValueError("params must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "params", params)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def span(self) -> float:
        return float(self.params[-1] - self.params[0])

    @property
    def spacing(self) -> float:
        return float(np.max(np.diff(self.params)))

    @property
    def shift(self) -> np.ndarray:
        """Closing translation ``nodes[-1] - nodes[0]`` (a lattice vector on a torus)."""
        return self.nodes[-1] - self.nodes[0]

    def is_uniform(self, rtol: float = 1e-9) -> bool:
        d = np.diff(self.params)
        return bool(np.ptp(d) <= rtol * np.mean(d))

    def loop_nodes(self) -> np.ndarray:
        """Nodes without the repeated endpoint (closed curves only)."""
        return self.nodes[:-1] if self.closed else self.nodes

    def derivatives(self):
        """First and second parameter derivatives at every node.

        Uniform spacing is required.  Interior nodes use five-point fourth
        order stencils; closed curves wrap periodically.  Second derivatives
        at the two outermost nodes of an open curve are NaN.
        """
        if not self.is_uniform(1e-6):
            raise ValueError("stencil derivatives need uniformly spaced params")
        h = self.span / (len(self.params) - 1)
        if self.closed:
            x = self.loop_nodes()
            m = len(x)
            s = self.shift
            ext = np.concatenate([x[-2:] - s, x, x[:2] + s])
            d1 = (ext[0:m] - 8 * ext[1 : m + 1] + 8 * ext[3 : m + 3] - ext[4 : m + 4]) / (12 * h)
            d2 = (
                -ext[0:m] + 16 * ext[1 : m + 1] - 30 * ext[2 : m + 2] + 16 * ext[3 : m + 3] - ext[4 : m + 4]
            ) / (12 * h * h)
            return np.vstack([d1, d1[:1]]), np.vstack([d2, d2[:1]])
        x = self.nodes
        m = len(x)
        d1 = np.empty_like(x)
        d2 = np.full_like(x, np.nan)
        if m >= 5:
            d1[2:-2] = (x[:-4] - 8 * x[1:-3] + 8 * x[3:-1] - x[4:]) / (12 * h)
            d2[2:-2] = (-x[:-4] + 16 * x[1:-3] - 30 * x[2:-2] + 16 * x[3:-1] - x[4:]) / (12 * h * h)
            d1[0] = (-25 * x[0] + 48 * x[1] - 36 * x[2] + 16 * x[3] - 3 * x[4]) / (12 * h)
            d1[1] = (-3 * x[0] - 10 * x[1] + 18 * x[2] - 6 * x[3] + x[4]) / (12 * h)
            d1[-1] = (25 * x[-1] - 48 * x[-2] + 36 * x[-3] - 16 * x[-4] + 3 * x[-5]) / (12 * h)
            d1[-2] = (3 * x[-1] + 10 * x[-2] - 18 * x[-3] + 6 * x[-4] - x[-5]) / (12 * h)
        else:
            d1[:] = np.gradient(x, h, axis=0)
        return d1, d2


class CurveMeasure(NamedTuple):
    length: float
    energy: float


# --------------------------------------------------------------------------
# pointwise tensor algebra


def _check_in_domain(domain: ChartDomain, x, margin: float = 0.0):
    if not np.all(domain.contains(x, margin)):
        raise DomainError(f"point outside chart box (margin {margin:g}): {np.asarray(x)}")


def metric_eval(field: MetricField, x) -> np.ndarray:
    """Checked metric evaluation: domain membership and positive definiteness."""
    x = np.asarray(x, dtype=float)
    _check_in_domain(field.domain, x)
    g = field.g(x)
    if not np.all(np.isfinite(g)):
        raise DegenerateMetric("metric has non-finite entries")
    if np.any(np.linalg.eigvalsh(g)[..., 0] <= 0):
        raise DegenerateMetric("metric is not positive definite")
    return g


def _fd_axes(fn: ArrayFn, x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of ``fn`` along every coordinate; new last axis."""
    n = x.shape[-1]
    E = np.eye(n) * h
    pts = np.concatenate([x[..., None, :] + E, x[..., None, :] - E], axis=-2)
    vals = np.moveaxis(fn(pts), x.ndim - 1, -1)
    return (vals[..., :n] - vals[..., n:]) / (2 * h)


def metric_deriv(field: MetricField, x) -> np.ndarray:
    """``dg[..., i, j, k]``: analytic when available, else central differences."""
    x = np.asarray(x, dtype=float)
    if field.flat:
        return np.zeros(x.shape + (x.shape[-1], x.shape[-1]))
    if field.deriv is not None:
        return field.deriv(field.domain.reduce(x))
    return _fd_axes(field.g, x, field.fd_step)


def _gamma_from(g: np.ndarray, dg: np.ndarray) -> np.ndarray:
    try:
        ginv = np.linalg.inv(g)
    except np.linalg.LinAlgError as exc:
        raise SingularMetric(str(exc)) from exc
    # lower[..., l, i, j] = d_i g_jl + d_j g_il - d_l g_ij
    lower = (
        np.einsum("...jli->...lij", dg)
        + np.einsum("...ilj->...lij", dg)
        - np.einsum("...ijl->...lij", dg)
    )
    n = g.shape[-1]
    gam = 0.5 * (ginv @ lower.reshape(lower.shape[:-2] + (n * n,))).reshape(lower.shape)
    return 0.5 * (gam + np.swapaxes(gam, -1, -2))


def christoffel(field: MetricField, x) -> np.ndarray:
    """Christoffel symbols ``gamma[..., k, i, j]``, symmetric in ``(i, j)`` exactly."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if field.flat:
        return np.zeros(x.shape + (n, n))
    return _gamma_from(field.g(x), metric_deriv(field, x))


def christoffel_checked(field: MetricField, x) -> np.ndarray:
    """:func:`christoffel` with the interior-of-domain precondition enforced."""
    margin = 0.0 if field.deriv is not None else field.fd_step
    _check_in_domain(field.domain, x, margin)
    g = field.g(x)
    cond = np.linalg.cond(g)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
        raise SingularMetric("metric too ill-conditioned for Christoffel symbols")
    return christoffel(field, x)


def christoffel_deriv(field: MetricField, x) -> np.ndarray:
    """``dgamma[..., k, i, j, l] = d Gamma^k_ij / d x_l``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if field.flat:
        return np.zeros(x.shape + (n, n, n))
    if field.deriv is not None and field.deriv2 is not None:
        xr = field.domain.reduce(x)
        g = field.eval(xr)
        dg = field.deriv(xr)
        d2g = field.deriv2(xr)
        ginv = np.linalg.inv(g)
        lower = (
            np.einsum("...jli->...lij", dg)
            + np.einsum("...ilj->...lij", dg)
            - np.einsum("...ijl->...lij", dg)
        )
        dlower = (
            np.einsum("...jlim->...lijm", d2g)
            + np.einsum("...iljm->...lijm", d2g)
            - np.einsum("...ijlm->...lijm", d2g)
        )
        dginv = -np.einsum("...ka,...abm,...bl->...klm", ginv, dg, ginv)
        out = 0.5 * (
            np.einsum("...klm,...lij->...kijm", dginv, lower)
            + np.einsum("...kl,...lijm->...kijm", ginv, dlower)
        )
        return 0.5 * (out + np.swapaxes(out, -2, -3))
    return _fd_axes(lambda p: christoffel(field, p), x, field.fd_step)


def norm_sq(field: MetricField, x, v) -> np.ndarray:
    return np.einsum("...i,...ij,...j->...", v, field.g(x), v)


# --------------------------------------------------------------------------
# curve functionals


def curve_length(field, c: CurveDiscrete) -> CurveMeasure:
    """Length and energy ``E = 1/2 int |c'|^2`` of a sampled curve.

    Closed curves use the periodic trapezoid rule, open curves composite
    Simpson.  ``field`` may be a :class:`MetricField` or :class:`FinslerField`.
    """
    _check_in_domain(field.domain, c.nodes)
    d1, _ = c.derivatives()
    if isinstance(field, FinslerField):
        speed = field.norm(c.nodes, d1)
    else:
        speed = np.sqrt(norm_sq(field, c.nodes, d1))
    if c.closed:
        h = c.span / (len(c.params) - 1)
        L = h * float(np.sum(speed[:-1]))
        E = 0.5 * h * float(np.sum(speed[:-1] ** 2))
    else:
        L = float(simpson(speed, x=c.params))
        E = 0.5 * float(simpson(speed**2, x=c.params))
    return CurveMeasure(L, E)


# --------------------------------------------------------------------------
# Finsler layer

_FINSLER_STEPS = (1e-3, 5e-4, 2.5e-4)


def _mixed_second_differences(F, x, v, h):
    n = v.shape[-1]
    E = np.eye(n)
    D = np.empty(v.shape + (n,))
    for i in range(n):
        for j in range(i, n):
            a = h * (E[i] + E[j])
            b = h * (E[i] - E[j])
            val = (F(x, v + a) - F(x, v + b) - F(x, v - b) + F(x, v - a)) / (4 * h * h)
            D[..., i, j] = val
            D[..., j, i] = val
    return D


def finsler_fundamental_tensor(ff: FinslerField, x, v) -> np.ndarray:
    """Hessian of ``f^2 / 2`` in the fibre direction at ``v``.

    Mixed central second differences at three step sizes are combined by
    Richardson extrapolation.  Disagreement of the first-level extrapolants
    beyond 1e-4 relative means ``f^2`` is not C^2 at ``v``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    fv = ff.norm(x, v)
    if np.any(~np.isfinite(fv)) or np.any(fv <= 1e-12):
        raise NonSmoothAtVector("fundamental tensor undefined at the zero vector")
    u = v / fv[..., None]

    def F(xx, vv):
        return 0.5 * ff.norm(xx, vv) ** 2

    h1, h2, h3 = _FINSLER_STEPS
    D1 = _mixed_second_differences(F, x, u, h1)
    D2 = _mixed_second_differences(F, x, u, h2)
    D3 = _mixed_second_differences(F, x, u, h3)
    R1 = (4 * D2 - D1) / 3
    R2 = (4 * D3 - D2) / 3
    G = (16 * R2 - R1) / 15
    scale = np.maximum(1.0, np.max(np.abs(G), axis=(-1, -2)))
    gap = np.max(np.abs(R1 - R2), axis=(-1, -2)) / scale
    if np.any(gap > 1e-4) or not np.all(np.isfinite(G)):
        raise NonSmoothAtVector(f"second differences do not converge (gap {np.max(gap):.3g})")
    return 0.5 * (G + np.swapaxes(G, -1, -2))


def legendre_transform(ff: FinslerField, x, v) -> np.ndarray:
    """Covector ``w -> g_v(w, v)``; its kernel is the ``g_v``-orthogonal complement of ``v``."""
    v = np.asarray(v, dtype=float)
    return np.einsum("...ij,...j->...i", finsler_fundamental_tensor(ff, x, v), v)


def check_reversible(ff: FinslerField, x, v) -> float:
    """Largest ``|f(x, -v) - f(x, v)|`` over the supplied samples."""
    v = np.asarray(v, dtype=float)
    return float(np.max(np.abs(ff.norm(x, -v) - ff.norm(x, v))))


def gram_schmidt(g: np.ndarray, seeds: Sequence[np.ndarray]) -> np.ndarray:
    """g-orthonormalise ``seeds`` in order, dropping dependent vectors.

    Returns a matrix whose columns are the accepted vectors.
    """
    basis = []
    for s in seeds:
        u = np.array(s, dtype=float)
        for b in basis:
            u = u - (b @ g @ u) * b
        nrm = np.sqrt(u @ g @ u)
        if nrm > 1e-8:
            basis.append(u / nrm)
    return np.array(basis).T
