"""Registry of the metric fields used by the test suites and the CLI."""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from .chart_metric import ChartDomain, FinslerField, MetricField

# Keep clear of the coordinate poles of the spherical-type charts.
POLE_MARGIN = 0.25


def euclidean(dim: int = 3, half_width: float = 4.0) -> MetricField:
    n = int(dim)
    dom = ChartDomain(n, tuple((-half_width, half_width) for _ in range(n)))
    eye = np.eye(n)

    def ev(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(eye, x.shape + (n,)).copy()

    return MetricField(dom, ev, fd_step=1e-5, inj=2.0 * half_width, flat=True, name="euclidean")


def flat_torus(periods=(2.0, 2.0, 2.0)) -> MetricField:
    periods = tuple(float(p) for p in periods)
    n = len(periods)
    dom = ChartDomain(n, tuple((0.0, p) for p in periods), periodic=periods)
    eye = np.eye(n)

    def ev(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(eye, x.shape + (n,)).copy()

    return MetricField(dom, ev, inj=0.5 * min(periods), flat=True, name="flat-torus")


def sphere_chart(radius: float = 1.0) -> MetricField:
    """Round sphere in (colatitude, longitude) coordinates; longitude is periodic."""
    r2 = float(radius) ** 2
    dom = ChartDomain(2, ((POLE_MARGIN, np.pi - POLE_MARGIN), (0.0, 2 * np.pi)), (None, 2 * np.pi))

    def ev(x):
        th = np.asarray(x, dtype=float)[..., 0]
        g = np.zeros(th.shape + (2, 2))
        g[..., 0, 0] = r2
        g[..., 1, 1] = r2 * np.sin(th) ** 2
        return g

    def d1(x):
        th = np.asarray(x, dtype=float)[..., 0]
        dg = np.zeros(th.shape + (2, 2, 2))
        dg[..., 1, 1, 0] = r2 * np.sin(2 * th)
        return dg

    def d2(x):
        th = np.asarray(x, dtype=float)[..., 0]
        ddg = np.zeros(th.shape + (2, 2, 2, 2))
        ddg[..., 1, 1, 0, 0] = 2 * r2 * np.cos(2 * th)
        return ddg

    return MetricField(dom, ev, d1, d2, inj=np.pi * radius, name="sphere-chart")


def _ellipsoid_partial(abc, th, ph, a: int, b: int) -> np.ndarray:
    """Mixed partial d^a/dth^a d^b/dph^b of the embedding, shape (..., 3)."""
    A, B, C = abc
    s = np.sin(th + a * np.pi / 2)
    out = np.empty(np.shape(th) + (3,))
    out[..., 0] = A * s * np.cos(ph + b * np.pi / 2)
    out[..., 1] = B * s * np.sin(ph + b * np.pi / 2)
    out[..., 2] = C * np.cos(th + a * np.pi / 2) if b == 0 else 0.0
    return out


def ellipsoid_chart(axes=(1.0, 1.1, 1.3), polar_axis: int = 2) -> MetricField:
    """Ellipsoid with semi-axes ``axes`` in polar coordinates about ``polar_axis``.

    The equator ``th = pi/2`` of this chart is the principal section orthogonal
    to the polar axis, so each of the three planar equators is reached by
    choosing the polar axis.
    """
    axes = tuple(float(a) for a in axes)
    others = [axes[i] for i in range(3) if i != polar_axis]
    abc = (others[0], others[1], axes[polar_axis])
    dom = ChartDomain(2, ((POLE_MARGIN, np.pi - POLE_MARGIN), (0.0, 2 * np.pi)), (None, 2 * np.pi))

    def tensors(x, order):
        """Stacked embedding partials: T[k] has ``k`` chart-index axes before the R^3 axis."""
        x = np.asarray(x, dtype=float)
        th, ph = x[..., 0], x[..., 1]
        out = []
        for k in range(1, order + 1):
            T = np.empty(th.shape + (2,) * k + (3,))
            for ks in np.ndindex(*(2,) * k):
                a = k - sum(ks)
                T[(Ellipsis,) + ks + (slice(None),)] = _ellipsoid_partial(abc, th, ph, a, k - a)
            out.append(T)
        return out

    def ev(x):
        (T1,) = tensors(x, 1)
        return np.einsum("...ia,...ja->...ij", T1, T1)

    def d1(x):
        T1, T2 = tensors(x, 2)
        A = np.einsum("...ika,...ja->...ijk", T2, T1)
        return A + np.swapaxes(A, -3, -2)

    def d2(x):
        T1, T2, T3 = tensors(x, 3)
        A = np.einsum("...ikma,...ja->...ijkm", T3, T1)
        B = np.einsum("...ika,...jma->...ijkm", T2, T2)
        return A + np.swapaxes(A, -4, -3) + B + np.swapaxes(B, -2, -1)

    return MetricField(dom, ev, d1, d2, inj=2.0, name="ellipsoid-chart")


def ellipsoid_embedding(axes, polar_axis: int, x) -> np.ndarray:
    """Points of the ellipsoid in R^3 for chart coordinates ``x``."""
    axes = tuple(float(a) for a in axes)
    others = [i for i in range(3) if i != polar_axis]
    x = np.asarray(x, dtype=float)
    th, ph = x[..., 0], x[..., 1]
    out = np.empty(x.shape[:-1] + (3,))
    out[..., others[0]] = axes[others[0]] * np.sin(th) * np.cos(ph)
    out[..., others[1]] = axes[others[1]] * np.sin(th) * np.sin(ph)
    out[..., polar_axis] = axes[polar_axis] * np.cos(th)
    return out


def poly_test(dim: int = 2, c2: float = 1.0, c4: float = 0.0, half_width: float = 2.0) -> MetricField:
    """``g_11 = 1 + c2 x_1^2 + c4 x_1^4``, identity elsewhere."""
    n = int(dim)
    dom = ChartDomain(n, tuple((-half_width, half_width) for _ in range(n)))

    def ev(x):
        x = np.asarray(x, dtype=float)
        g = np.broadcast_to(np.eye(n), x.shape + (n,)).copy()
        x1 = x[..., 0]
        g[..., 0, 0] = 1 + c2 * x1**2 + c4 * x1**4
        return g

    def d1(x):
        x = np.asarray(x, dtype=float)
        dg = np.zeros(x.shape + (n, n))
        x1 = x[..., 0]
        dg[..., 0, 0, 0] = 2 * c2 * x1 + 4 * c4 * x1**3
        return dg

    def d2(x):
        x = np.asarray(x, dtype=float)
        ddg = np.zeros(x.shape + (n, n, n))
        ddg[..., 0, 0, 0, 0] = 2 * c2 + 12 * c4 * x[..., 0] ** 2
        return ddg

    return MetricField(dom, ev, d1, d2, inj=half_width, name="poly-test")


def strip_analytic(field: MetricField) -> MetricField:
    """Same metric with the analytic derivatives removed (forces finite differences)."""
    return MetricField(field.domain, field.eval, None, None, field.fd_step, field.inj, field.flat, field.name)


def quartic_finsler(dim: int = 3, half_width: float = 4.0) -> FinslerField:
    """Reversible non-Riemannian norm ``(sum v_i^4)^(1/4)``."""
    dom = ChartDomain(dim, tuple((-half_width, half_width) for _ in range(dim)))
    return FinslerField(dom, lambda x, v: np.sum(np.asarray(v) ** 4, axis=-1) ** 0.25, name="quartic")


METRICS: Dict[str, Callable[..., MetricField]] = {
    "euclidean": euclidean,
    "flat-torus": flat_torus,
    "sphere-chart": sphere_chart,
    "ellipsoid-chart": ellipsoid_chart,
    "poly-test": poly_test,
}


def make_metric(name: str, **params) -> MetricField:
    try:
        factory = METRICS[name]
    except KeyError:
        raise KeyError(f"unknown metric {name!r}; known: {sorted(METRICS)}") from None
    return factory(**params)
