import json

import numpy as np
import pytest

import oracles
from geoperturb.chart_metric import CurveDiscrete
from geoperturb.errors import DimensionTooLow, GeometricallyEquivalent, NonTransversalContact, SeedSearchFailed
from geoperturb.intersect import (
    brute_close_pairs,
    choose_plane_seeds,
    disentangle,
    double_points,
    forbidden_offset_line_oracle,
    forbidden_offsets,
    hash_close_pairs,
    pairwise_intersections,
)
from geoperturb.scenarios import euclidean, flat_torus
from geoperturb.suites import random_closed_curves
from geoperturb.tubular import build_tubular_chart


def _loop(fn, n=4000):
    u = np.linspace(0, 2 * np.pi, n + 1)
    X = fn(u)
    X[-1] = X[0]
    return CurveDiscrete(X, u, closed=True)


def _line(p, d, t):
    return CurveDiscrete(np.asarray(p) + np.outer(t, d), t)


def test_figure_eight_has_one_crossing_at_origin(tmp_path):
    c = _loop(lambda u: np.column_stack([np.cos(u), np.sin(u) * np.cos(u)]))
    rep = double_points(c, euclidean(2), tol=0.01)
    assert rep.count == 1
    e = rep.events[0]
    np.testing.assert_allclose(e.point, [0, 0], atol=1e-9)
    np.testing.assert_allclose([e.param_a, e.param_b], [np.pi / 2, 3 * np.pi / 2], atol=1e-7)
    # tangents (-1, -1) and (1, -1) meet at a right angle
    assert abs(e.angle - np.pi / 2) < 1e-6
    data = json.loads(rep.to_json(tmp_path / "r.json").read_text())
    assert len(data["events"]) == 1 and data["tolerance"] == 0.01


def test_simple_loop_has_no_crossing_and_positive_clearance():
    c = _loop(lambda u: np.column_stack([np.cos(u), 0.5 * np.sin(u)]))
    rep = double_points(c, euclidean(2), tol=0.01)
    # nodes a quarter turn apart come closest on the minor axis: sqrt(2) * 0.5
    assert rep.count == 0 and abs(rep.clearance - np.sqrt(0.5)) < 1e-6


def test_hash_pairs_equal_brute_pairs():
    rng = np.random.default_rng(7)
    A = rng.uniform(0, 2, (600, 2))
    B = rng.uniform(0, 2, (500, 2))
    for field in (euclidean(2), flat_torus((2.0, 2.0))):
        h = {tuple(p) for p in hash_close_pairs(A, B, 0.05, field.domain)}
        b = {tuple(p) for p in brute_close_pairs(A, B, 0.05, field.domain)}
        assert h == b and len(h) > 0


def test_self_crossing_counts_match_polygon_oracle():
    curves = random_closed_curves(6, np.random.default_rng(11), spacing=0.004)
    f = euclidean(2)
    for c in curves:
        rep = double_points(c, f, tol=0.02)
        assert rep.count == len(oracles.polyline_self_crossings(c.nodes, closed=True))


def test_crossing_on_torus_across_the_seam():
    f = flat_torus((2.0, 2.0))
    t = np.linspace(0, 2, 1001)
    horiz = np.column_stack([t, np.full_like(t, 1.95)])
    # diagonal loop in the (1, 1) class crosses y = 1.95 once
    diag = np.column_stack([0.3 + t, t])
    a = CurveDiscrete(horiz, t, closed=True)
    b = CurveDiscrete(diag, t * np.sqrt(2), closed=True)
    rep = pairwise_intersections(a, b, f, tol=0.02)
    assert rep.count == 1
    np.testing.assert_allclose(rep.events[0].point, [0.25, 1.95], atol=1e-9)
    assert abs(rep.events[0].angle - np.pi / 4) < 1e-6


def test_same_trace_and_tangency_are_rejected():
    f = euclidean(2)
    t = np.linspace(-1, 1, 1001)
    a = _line([0, 0], [1.0, 0.0], t)
    with pytest.raises(GeometricallyEquivalent):
        pairwise_intersections(a, _line([0, 0], [1.0, 0.0], t), f, tol=0.01)
    cubic = CurveDiscrete(np.column_stack([t, t**3]), t)
    with pytest.raises(NonTransversalContact):
        pairwise_intersections(a, cubic, f, tol=0.01)
    with pytest.raises(ValueError):
        pairwise_intersections(a, cubic, f, tol=1e-3)


def test_disjoint_lines_in_space_have_no_events():
    f = euclidean(3)
    t = np.linspace(-1, 1, 1001)
    a = _line([0, 0, 0], [1.0, 0, 0], t)
    b = _line([0, 0, 0.05], [0, 1.0, 0], t)
    rep = pairwise_intersections(a, b, f, tol=0.01)
    assert rep.count == 0 and abs(rep.clearance - 0.05) < 1e-12


def test_plane_seeds_share_a_common_direction():
    f = euclidean(3)
    vs = [np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([1.0, 1.0, 1.0]) / np.sqrt(3)]
    ws = choose_plane_seeds(np.zeros(3), vs, f)
    for v, w in zip(vs, ws):
        assert abs(v @ w) < 1e-12 and abs(w @ w - 1) < 1e-12
    # every w_j lies in the plane spanned by v_j and one common vector
    normals = [np.cross(v, w) for v, w in zip(vs, ws)]
    common = np.cross(normals[0], normals[1])
    assert abs(common @ normals[2]) < 1e-12
    with pytest.raises(SeedSearchFailed):
        choose_plane_seeds(np.zeros(3), [vs[0], -vs[0]], f)
    with pytest.raises(DimensionTooLow):
        choose_plane_seeds(np.zeros(2), [np.array([1.0, 0])], euclidean(2))


def test_flat_forbidden_offset_matches_line_oracle():
    f = euclidean(3)
    vs = [np.array([1.0, 0, 0]), np.array([0.6, 0.8, 0])]
    ws = choose_plane_seeds(np.zeros(3), vs, f)
    cj, ck = (build_tubular_chart(f, np.zeros(3), v, w, 0.5, 0.07) for v, w in zip(vs, ws))
    for s_j in (0.005, 0.01, 0.02):
        got = forbidden_offsets(cj, ck, 0.03, s_j)
        s, u, t = oracles.line_plane_offset(np.zeros(3), vs[0], ws[0], vs[1], ws[1], s_j)
        assert abs(got.s_star - s) < 1e-9 and abs(got.t_star - u) < 1e-9 and abs(got.t_on_j - t) < 1e-9
        closed = forbidden_offset_line_oracle(np.zeros(3), vs[0], ws[0], vs[1], ws[1], s_j)
        assert abs(closed.s_star - s) < 1e-12


def test_disentangle_needs_three_dimensions():
    f = euclidean(2)
    with pytest.raises(DimensionTooLow):
        disentangle(f, np.zeros(2), [], 0.5, 0.07, 0.01)
