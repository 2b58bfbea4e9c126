import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoperturb.errors import BoundViolation, NotOrthonormal
from geoperturb.geodesic_flow import geodesic_residual
from geoperturb.chart_metric import CurveDiscrete
from geoperturb.scenarios import ellipsoid_chart, euclidean, sphere_chart
from geoperturb.tubular import RegionLabel, build_tubular_chart, classify_region, in_U, local_surface

ETA, EPS = 0.5, 0.0714


def _unit(f, p, v):
    return v / np.sqrt(v @ f.g(p) @ v)


@pytest.fixture(scope="module")
def ell_chart():
    f = ellipsoid_chart()
    p = np.array([np.pi / 2, 0.7])
    v = _unit(f, p, np.array([1.0, 0.3]))
    w = np.array([0.0, 1.0])
    w = _unit(f, p, w - (w @ f.g(p) @ v) * v)
    return build_tubular_chart(f, p, v, w, ETA, EPS)


def test_flat_chart_is_affine():
    f = euclidean(3)
    ch = build_tubular_chart(f, np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), ETA, EPS)
    x = ch.forward(np.array([0.3]), np.array([[0.01, -0.02]]))
    assert x.shape == (1, 3)
    np.testing.assert_allclose(np.abs(x[0]), [0.3, 0.01, 0.02], atol=1e-15)
    t, y = ch.inverse(x)
    np.testing.assert_allclose(t, [0.3], atol=1e-15)
    np.testing.assert_allclose(y, [[0.01, -0.02]], atol=1e-15)


@given(st.floats(-2 * ETA, 2 * ETA), st.floats(-0.99 * EPS, 0.99 * EPS))
@settings(max_examples=20, deadline=None)
def test_inverse_roundtrip_on_ellipsoid(ell_chart, t, r):
    x = ell_chart.forward(np.array([t]), np.array([[r]]))
    tt, yy = ell_chart.inverse(x)
    assert abs(tt[0] - t) < 1e-10 and abs(yy[0, 0] - r) < 1e-10


def test_t_lines_are_unit_speed_geodesics_orthogonal_to_slices(ell_chart):
    f = ell_chart.field
    t = np.linspace(-2 * ETA, 2 * ETA, 201)
    for r in (0.0, 0.5 * EPS, -0.9 * EPS):
        X = ell_chart.forward(t, np.full((t.size, 1), r))
        assert geodesic_residual(f, CurveDiscrete(X, t)) < 1e-6
        J = ell_chart.jacobian(t[::20], np.full((t[::20].size, 1), r))
        g = f.g(X[::20])
        dt, dy = J[..., :, 0], J[..., :, 1]
        np.testing.assert_allclose(np.einsum("...i,...ij,...j->...", dt, g, dt), 1.0, atol=1e-8)
        # the t direction is g-orthogonal to the slices t = const
        assert np.max(np.abs(np.einsum("...i,...ij,...j->...", dt, g, dy))) < 1e-7


def test_screened_coords_agree_with_full_inverse(ell_chart):
    rng = np.random.default_rng(5)
    t = rng.uniform(-1.1, 1.1, 1500)
    y = rng.uniform(-0.12, 0.12, (1500, 1))
    x = ell_chart.forward(t, y)
    window = (ETA, ETA + 6 * EPS, EPS)
    ts, ys, _ = ell_chart.tube_coords(x, window=window)
    tf, yf, _ = ell_chart.tube_coords(x)

    def member(tt, yy):
        with np.errstate(invalid="ignore"):
            return (np.abs(tt) > window[0]) & (np.abs(tt) < window[1]) & (np.abs(yy[:, 0]) < window[2])

    assert np.array_equal(member(ts, ys), member(tf, yf))
    kept = ~np.isnan(ts)
    np.testing.assert_array_equal(ts[kept], tf[kept])


def test_region_labels_in_euclidean_space():
    f = euclidean(3)
    ch = build_tubular_chart(f, np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), ETA, EPS)
    pts = np.array(
        [
            [0.1, 0.0, 0.0],
            [ETA + 3 * EPS, 0.01, 0.0],
            [-(ETA + 3 * EPS), 0.0, 0.01],
            [0.0, ETA + 3 * EPS, 0.0],
            [3.0, 0.0, 0.0],
        ]
    )
    lab = classify_region(ch, pts)
    assert list(lab) == [RegionLabel.CoreTube, RegionLabel.UPlus, RegionLabel.UMinus, RegionLabel.Shell, RegionLabel.Outside]
    assert list(in_U(ch, pts)) == [False, True, True, False, False]


def test_chart_preconditions():
    f = sphere_chart()
    p = np.array([np.pi / 2, 0.0])
    v = np.array([0.0, 1.0])
    w = np.array([1.0, 0.0])
    with pytest.raises(BoundViolation):
        build_tubular_chart(f, p, v, w, 0.5, 0.08)
    with pytest.raises(BoundViolation):
        build_tubular_chart(f, p, v, w, 1.2, 0.1)
    with pytest.raises(NotOrthonormal):
        build_tubular_chart(f, p, v, 2 * w, 0.5, 0.07)


def test_local_surface_contains_base_geodesic(ell_chart):
    s = local_surface(ell_chart, grid=(21, 5))
    assert s.points.shape == (21, 5, 2)
    mid = ell_chart.forward(s.t, np.zeros((s.t.size, 1)))
    np.testing.assert_allclose(s.points[:, 2], mid, atol=1e-14)
