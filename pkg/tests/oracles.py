"""Reference computations that share no code with the package.

Each oracle is deliberately plain: closed forms, quadrature, dense scans or
an off-the-shelf adaptive integrator with finite-difference Christoffels.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import quad, solve_ivp


# --------------------------------------------------------------------------
# Euclidean lines


def line_plane_offset(p, v_j, w_j, v_k, w_k, s_j):
    """Offset ``s`` of line ``k`` that makes it meet the displaced line ``j``.

    Line ``j`` is ``p + s_j w_j + t v_j``; the translated line ``k`` is
    ``p + s w_k + u v_k``.  Solve ``s_j w_j + t v_j = s w_k + u v_k`` by least
    squares and check the residual; returns ``(s, t, u)``.
    """
    A = np.column_stack([w_k, v_k, -v_j])
    rhs = s_j * np.asarray(w_j, dtype=float)
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    if np.linalg.norm(A @ sol - rhs) > 1e-12:
        return None
    return tuple(float(c) for c in sol)


def segment_distance(a0, a1, b0, b1, samples: int = 2001) -> float:
    """Minimal distance between two straight segments by a dense scan."""
    s = np.linspace(0.0, 1.0, samples)
    A = a0 + np.outer(s, a1 - a0)
    B = b0 + np.outer(s, b1 - b0)
    best = np.inf
    for chunk in np.array_split(np.arange(samples), 8):
        d = np.linalg.norm(A[chunk, None, :] - B[None, :, :], axis=-1)
        best = min(best, float(d.min()))
    return best


def dense_min_distance(A, B) -> float:
    A, B = np.asarray(A), np.asarray(B)
    best = np.inf
    for lo in range(0, len(A), 512):
        d = np.linalg.norm(A[lo : lo + 512, None, :] - B[None, :, :], axis=-1)
        best = min(best, float(d.min()))
    return best


def polyline_self_crossings(X, closed: bool = True):
    """Proper crossings of a planar polygon by testing every pair of chords."""
    X = np.asarray(X, dtype=float)
    n = len(X) - 1
    P, Q = X[:-1], X[1:]
    hits = []
    for i in range(n):
        j = np.arange(i + 2, n)
        if closed and i == 0:
            j = j[j != n - 1]
        if j.size == 0:
            continue
        d1 = Q[i] - P[i]
        d2 = Q[j] - P[j]
        den = d1[0] * d2[:, 1] - d1[1] * d2[:, 0]
        r = P[j] - P[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / den
            b = (r[:, 0] * d1[1] - r[:, 1] * d1[0]) / den
        ok = (den != 0) & (a >= 0) & (a < 1) & (b >= 0) & (b < 1)
        hits.extend((i, int(k)) for k in j[ok])
    return hits


# --------------------------------------------------------------------------
# ellipse perimeter


def ellipse_perimeter(a: float, b: float) -> float:
    val, _ = quad(lambda t: np.hypot(a * np.sin(t), b * np.cos(t)), 0.0, 2 * np.pi, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


# --------------------------------------------------------------------------
# return map of the ellipsoid geodesic flow


def ellipsoid_metric(axes, x):
    """First fundamental form from the hand-differentiated embedding."""
    a, b, c = axes
    th, ph = x
    d_th = np.array([a * np.cos(th) * np.cos(ph), b * np.cos(th) * np.sin(ph), -c * np.sin(th)])
    d_ph = np.array([-a * np.sin(th) * np.sin(ph), b * np.sin(th) * np.cos(ph), 0.0])
    J = np.column_stack([d_th, d_ph])
    return J.T @ J


def fd_christoffel(metric, x, h: float = 1e-4):
    x = np.asarray(x, dtype=float)
    n = len(x)
    dg = np.empty((n, n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        dg[:, :, k] = (
            -metric(x + 2 * e) + 8 * metric(x + e) - 8 * metric(x - e) + metric(x - 2 * e)
        ) / (12 * h)
    ginv = np.linalg.inv(metric(x))
    first = 0.5 * (np.einsum("lji->lij", dg) + np.einsum("lij->lij", dg) - np.einsum("ijl->lij", dg))
    return np.einsum("kl,lij->kij", ginv, first)


def return_map_fd(metric, x0, u0, period: float, h: float = 1e-6):
    """Normal Jacobi monodromy from central differences of the flow map.

    Flow is integrated by ``solve_ivp`` (DOP853, tight tolerances) with
    Christoffel symbols from finite differences of ``metric``.  Returns the
    2x2 matrix acting on (normal displacement, normal covariant derivative).
    """
    x0, u0 = np.asarray(x0, dtype=float), np.asarray(u0, dtype=float)

    def rhs(_, z):
        x, v = z[:2], z[2:]
        G = fd_christoffel(metric, x)
        return np.concatenate([v, -np.einsum("kij,i,j->k", G, v, v)])

    def flow(x, v):
        sol = solve_ivp(rhs, (0.0, period), np.concatenate([x, v]), method="DOP853", rtol=1e-11, atol=1e-12)
        return sol.y[:2, -1], sol.y[2:, -1]

    def unit_normal(x, u):
        g = metric(x)
        rot = np.array([-u[1], u[0]])
        n = rot - (rot @ g @ u) / (u @ g @ u) * u
        return n / np.sqrt(n @ g @ n)

    n0 = unit_normal(x0, u0)
    G0 = fd_christoffel(metric, x0)
    xe, ve = flow(x0, u0)
    ne = unit_normal(xe, ve)
    ge = metric(xe)
    Ge = fd_christoffel(metric, xe)
    M = np.empty((2, 2))
    for col, (J0, W0) in enumerate(((1.0, 0.0), (0.0, 1.0))):
        dx = h * J0 * n0
        dv = h * (W0 * n0 - J0 * np.einsum("kij,i,j->k", G0, u0, n0))
        xp, vp = flow(x0 + dx, u0 + dv)
        xm, vm = flow(x0 - dx, u0 - dv)
        Jx = (xp - xm) / (2 * h)
        Jv = (vp - vm) / (2 * h)
        cov = Jv + np.einsum("kij,i,j->k", Ge, ve, Jx)
        M[0, col] = ne @ ge @ Jx
        M[1, col] = ne @ ge @ cov
    return M
