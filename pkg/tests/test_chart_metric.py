import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoperturb.chart_metric import (
    ChartDomain,
    CurveDiscrete,
    check_reversible,
    christoffel,
    christoffel_checked,
    christoffel_deriv,
    curve_length,
    finsler_fundamental_tensor,
    gram_schmidt,
    legendre_transform,
    metric_deriv,
    metric_eval,
    riemannian_square,
)
from geoperturb.errors import DegenerateMetric, DomainError, NonSmoothAtVector
from geoperturb.scenarios import (
    ellipsoid_chart,
    euclidean,
    flat_torus,
    poly_test,
    quartic_finsler,
    sphere_chart,
    strip_analytic,
)

theta = st.floats(0.4, np.pi - 0.4)
phi = st.floats(0.0, 2 * np.pi)


@given(theta, phi)
@settings(max_examples=30, deadline=None)
def test_sphere_christoffel_closed_form(th, ph):
    G = christoffel(sphere_chart(), np.array([th, ph]))
    expect = np.zeros((2, 2, 2))
    expect[0, 1, 1] = -np.sin(th) * np.cos(th)
    expect[1, 0, 1] = expect[1, 1, 0] = np.cos(th) / np.sin(th)
    np.testing.assert_allclose(G, expect, atol=1e-13)


@given(theta, phi)
@settings(max_examples=20, deadline=None)
def test_ellipsoid_derivatives_match_differences(th, ph):
    f = ellipsoid_chart()
    fd = strip_analytic(f)
    x = np.array([th, ph])
    np.testing.assert_allclose(metric_deriv(f, x), metric_deriv(fd, x), atol=1e-8)
    h = 1e-5
    fd_gamma = np.stack(
        [(christoffel(f, x + h * e) - christoffel(f, x - h * e)) / (2 * h) for e in np.eye(2)], axis=-1
    )
    np.testing.assert_allclose(christoffel_deriv(f, x), fd_gamma, atol=1e-8)


def test_christoffel_symmetric_and_broadcasts():
    f = poly_test(3, c2=0.7, c4=0.2)
    x = np.random.default_rng(0).uniform(-1, 1, (4, 5, 3))
    G = christoffel(f, x)
    assert G.shape == (4, 5, 3, 3, 3)
    assert np.array_equal(G, np.swapaxes(G, -1, -2))
    # only Gamma^1_11 = g_11' / (2 g_11) is nonzero
    x1 = x[..., 0]
    np.testing.assert_allclose(G[..., 0, 0, 0], (1.4 * x1 + 0.8 * x1**3) / (2 * (1 + 0.7 * x1**2 + 0.2 * x1**4)))
    G[..., 0, 0, 0] = 0
    assert np.all(G == 0)


def test_metric_eval_rejects_outside_and_indefinite():
    f = euclidean(2)
    with pytest.raises(DomainError):
        metric_eval(f, np.array([10.0, 0.0]))
    dom = ChartDomain(2, ((-1, 1), (-1, 1)))
    from geoperturb.chart_metric import MetricField

    bad = MetricField(dom, lambda x: np.broadcast_to(np.diag([1.0, -1.0]), np.shape(x)[:-1] + (2, 2)))
    with pytest.raises(DegenerateMetric):
        metric_eval(bad, np.zeros(2))
    with pytest.raises(DomainError):
        christoffel_checked(strip_analytic(poly_test()), np.array([2.0, 0.0]))


@given(st.floats(-10, 10), st.floats(-10, 10))
@settings(max_examples=50, deadline=None)
def test_periodic_minimal_image(a, b):
    dom = flat_torus((2.0, 3.0)).domain
    x = np.array([a, b])
    r = dom.reduce(x)
    assert np.all(r >= 0) and r[0] < 2.0 and r[1] < 3.0
    d = dom.displacement(np.zeros(2), x)
    assert abs(d[0]) <= 1.0 + 1e-12 and abs(d[1]) <= 1.5 + 1e-12
    np.testing.assert_allclose(dom.reduce(d), r, atol=1e-12)


def test_curve_validation():
    with pytest.raises(ValueError):
        CurveDiscrete(np.zeros((2, 2)), np.arange(2.0))
    with pytest.raises(ValueError):
        CurveDiscrete(np.zeros((4, 2)), np.array([0.0, 1.0, 1.0, 2.0]))
    with pytest.raises(ValueError):
        CurveDiscrete(np.zeros((4, 2)), np.arange(3.0))


@pytest.mark.parametrize("closed", [True, False])
def test_circle_length_converges_at_fourth_order(closed):
    r = 1.3
    span = 2 * np.pi if closed else np.pi
    errs = []
    for n in (100, 200, 400):
        u = np.linspace(0, span, n + 1)
        X = r * np.column_stack([np.cos(u), np.sin(u)])
        if closed:
            X[-1] = X[0]
        L, E = curve_length(euclidean(2), CurveDiscrete(X, u, closed))
        errs.append(max(abs(L - r * span), abs(E - 0.5 * r * r * span) / r))
    assert errs[-1] < 1e-7
    order = np.log2(errs[1] / errs[2])
    assert order > 3.7


def test_ellipse_equator_length_matches_quadrature():
    import oracles

    f = ellipsoid_chart((1.0, 1.1, 1.3), polar_axis=2)
    u = np.linspace(0, 2 * np.pi, 801)
    X = np.column_stack([np.full_like(u, np.pi / 2), u])
    X[-1] = X[0] + np.array([0.0, 2 * np.pi])
    L, _ = curve_length(f, CurveDiscrete(X, u, closed=True))
    assert abs(L - oracles.ellipse_perimeter(1.0, 1.1)) < 1e-10


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
@settings(max_examples=25, deadline=None)
def test_fundamental_tensor_of_riemannian_square(x, v):
    v = np.array(v)
    if np.linalg.norm(v) < 1e-2:
        v = v + 0.5
    f = poly_test(3, c2=0.5)
    G = finsler_fundamental_tensor(riemannian_square(f), np.array(x) * 0.5, v)
    np.testing.assert_allclose(G, f.g(np.array(x) * 0.5), atol=1e-8)
    # Legendre transform of v is g v
    np.testing.assert_allclose(legendre_transform(riemannian_square(f), np.array(x) * 0.5, v), G @ v, atol=1e-8)


def test_quartic_norm_is_reversible_and_not_quadratic():
    ff = quartic_finsler(3)
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (50, 3))
    v = rng.normal(size=(50, 3))
    assert check_reversible(ff, x, v) <= 1e-12
    G = finsler_fundamental_tensor(ff, x, v)
    # Euler identity for 2-homogeneous f^2/2: g_v(v, v) = f(v)^2
    np.testing.assert_allclose(np.einsum("...i,...ij,...j->...", v, G, v), ff.norm(x, v) ** 2, rtol=1e-7)
    assert np.max(np.abs(G - np.eye(3))) > 0.1
    with pytest.raises(NonSmoothAtVector):
        finsler_fundamental_tensor(ff, x[0], np.zeros(3))


def test_gram_schmidt_orthonormal_and_drops_dependent():
    g = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 1.5]])
    seeds = [np.array([1.0, 0, 0]), np.array([2.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])]
    Q = gram_schmidt(g, seeds)
    assert Q.shape == (3, 3)
    np.testing.assert_allclose(Q.T @ g @ Q, np.eye(3), atol=1e-12)
