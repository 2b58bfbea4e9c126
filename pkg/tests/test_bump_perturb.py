import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoperturb.bump_perturb import (
    lipschitz_in_s,
    make_cutoffs,
    make_family,
    parallel_convexity_check,
    pullback_metric,
    smoothstep,
    smoothstep_deriv,
    tube_flow,
)
from geoperturb.errors import BoundViolation, NotParallelForm
from geoperturb.scenarios import euclidean
from geoperturb.tubular import build_tubular_chart

ETA, EPS, DELTA = 0.5, 0.07, 0.03


@pytest.fixture(scope="module")
def flat_family():
    f = euclidean(3)
    ch = build_tubular_chart(f, np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), ETA, EPS)
    return make_family(ch, DELTA, s_max=0.02)


@given(st.floats(-2, 3))
@settings(max_examples=60, deadline=None)
def test_smoothstep_is_a_symmetric_transition(x):
    s = smoothstep(x)
    assert 0 <= s <= 1
    np.testing.assert_allclose(s + smoothstep(1 - x), 1.0, atol=1e-15)
    if x <= 0:
        assert s == 0
    if x >= 1:
        assert s == 1


def test_smoothstep_derivative_and_monotonicity():
    x = np.linspace(0.01, 0.99, 99)
    h = 1e-6
    fd = (smoothstep(x + h) - smoothstep(x - h)) / (2 * h)
    np.testing.assert_allclose(smoothstep_deriv(x), fd, atol=1e-7)
    assert np.all(np.diff(smoothstep(np.linspace(-0.5, 1.5, 401))) >= 0)


def test_cutoff_supports():
    c = make_cutoffs(DELTA, ETA, EPS, DELTA)
    t = np.linspace(-1.2, 1.2, 2401)
    inner = np.abs(t) <= ETA + 2 * EPS
    assert np.all(c.psi_t(t)[inner] == 1)
    assert np.all(c.psi_t(t)[np.abs(t) >= ETA + 4 * EPS] == 0)
    r = np.linspace(0, 3 * DELTA, 301)
    assert np.all(c.psi_r(r)[r <= DELTA] == 1) and np.all(c.psi_r(r)[r >= 2 * DELTA] == 0)
    y = np.zeros((t.size, 1))
    a = c.alpha(t, y)
    outside = (np.abs(t) <= ETA) | (np.abs(t) >= ETA + 6 * EPS)
    assert np.all(a[outside] == 0) and np.max(a) == 1
    assert np.all(c.alpha(t, np.full((t.size, 1), 2 * DELTA)) == 0)


def test_cutoff_bounds_are_enforced():
    with pytest.raises(BoundViolation):
        make_cutoffs(DELTA, ETA, ETA / 7, DELTA)
    with pytest.raises(BoundViolation):
        make_cutoffs(DELTA, ETA, EPS, EPS / 2)
    with pytest.raises(BoundViolation):
        make_cutoffs(0.0, ETA, EPS, DELTA)


def test_tube_flow_moves_axis_by_profile_and_inverts():
    c = make_cutoffs(DELTA, ETA, EPS, DELTA)
    t = np.linspace(-1.0, 1.0, 81)
    y = np.zeros((t.size, 2))
    s = 0.02
    yn = tube_flow(c, s, t, y)
    np.testing.assert_allclose(yn[:, 0], c.profile(s, t), atol=1e-12)
    assert np.all(yn[:, 1] == 0)
    rng = np.random.default_rng(3)
    y2 = rng.uniform(-0.05, 0.05, (t.size, 2))
    back = tube_flow(c, -s, t, tube_flow(c, s, t, y2))
    np.testing.assert_allclose(back, y2, atol=1e-10)
    # points where the speed vanishes stay put exactly
    far = np.full((t.size, 2), 0.05)
    assert np.array_equal(tube_flow(c, s, t, far), far)


def test_metric_unchanged_at_zero_and_outside_support(flat_family):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (300, 3)) * [1.0, 0.1, 0.1]
    assert np.array_equal(flat_family.metric_at(0.0, x), flat_family.field.g(x))
    a = flat_family.alpha(x)
    g = flat_family.metric_at(0.02, x)
    assert np.array_equal(g[a == 0], flat_family.field.g(x[a == 0]))
    assert np.any(a > 0)
    assert np.all(np.linalg.eigvalsh(g) > 0)
    with pytest.raises(BoundViolation):
        flat_family.metric_at(0.05, x)


def test_pullback_under_isometry_and_scaling():
    f = euclidean(3)
    c, s = np.cos(0.4), np.sin(0.4)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    x = np.random.default_rng(1).uniform(-1, 1, (10, 3))
    np.testing.assert_allclose(pullback_metric(f, lambda p: 0.5 * p @ R.T, x), 0.25 * np.broadcast_to(np.eye(3), (10, 3, 3)), atol=1e-9)


def test_metric_is_lipschitz_in_s(flat_family):
    x = flat_family.displaced_nodes(0.01)[::10]
    L = lipschitz_in_s(flat_family, x, count=10)
    assert np.isfinite(L) and L > 0


def test_dump_writes_header_and_rows(flat_family, tmp_path):
    pts = np.array([[0.6, 0.0, 0.0], [2.0, 0.0, 0.0]])
    jpath, cpath = flat_family.dump(0.01, pts, tmp_path)
    head = json.loads(jpath.read_text())
    assert head["s"] == 0.01 and head["delta"] == DELTA
    rows = list(csv.reader(cpath.open()))
    assert rows[0][:3] == ["x_1", "x_2", "x_3"] and len(rows[0]) == 12
    assert len(rows) == 3
    np.testing.assert_array_equal(np.array(rows[2][3:], dtype=float), np.eye(3).ravel())


def test_convexity_check_requires_parallel_form():
    def g0(x):
        return np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2))

    def g1(x):
        g = np.array(g0(x))
        g[..., 1, 1] = 1 + x[..., 1] ** 2
        return g

    grid = (np.linspace(-1, 1, 11), np.array([[0.1], [0.3]]))
    rep = parallel_convexity_check(g0, g1, lambda x: 0.5 + 0.4 * np.sin(x[..., 0]), grid)
    assert rep.passed and rep.residual < 1e-6

    def skew(x):
        g = np.array(g0(x))
        g[..., 0, 1] = g[..., 1, 0] = 0.2
        return g

    with pytest.raises(NotParallelForm):
        parallel_convexity_check(g0, skew, lambda x: 0.5 * np.ones(np.shape(x)[:-1]), grid)
    rep = parallel_convexity_check(g0, skew, lambda x: 0.5 * np.ones(np.shape(x)[:-1]), grid, strict=False)
    assert not rep.parallel_form and not rep.passed
