import numpy as np
import pytest

import oracles
from geoperturb.closed_geo import (
    DescentLog,
    bumpy_audit,
    crossing_removal_pipeline,
    dedup,
    descend_loop,
    discrete_energy,
    ellipsoid_targets,
    find_closed_geodesics,
    iterate,
    lattice_shift,
    linearized_poincare,
    torus_targets,
)
from geoperturb.scenarios import ellipsoid_chart, flat_torus

PERIODS = (2.0, 3.0)


@pytest.fixture(scope="module")
def torus():
    return flat_torus(PERIODS)


@pytest.fixture(scope="module")
def equator():
    f = ellipsoid_chart((1.0, 1.1, 1.3), polar_axis=2)
    (cg,) = find_closed_geodesics(f, (0, 1), seeds=[np.array([np.pi / 2 + 0.02, 0.1])])
    return f, cg


@pytest.mark.parametrize("k, length, mult", [((1, 0), 2.0, 1), ((1, 1), np.sqrt(13.0), 1), ((2, 0), 4.0, 2)])
def test_flat_torus_loops_are_straight_and_degenerate(torus, k, length, mult):
    loops = find_closed_geodesics(torus, k, init_count=2, seed=1)
    assert len(loops) >= 1
    for cg in loops:
        assert abs(cg.length - length) < 1e-8
        assert cg.multiplicity == mult and cg.prime == (mult == 1)
        P = linearized_poincare(torus, cg)
        # normal Jacobi fields grow linearly: the return map is a shear
        np.testing.assert_allclose(P.monodromy, [[1.0, length], [0.0, 1.0]], atol=1e-9)
        assert not P.nondegenerate


def test_lattice_shift_checks_the_class(torus):
    np.testing.assert_array_equal(lattice_shift(torus, (1, -2)), [2.0, -6.0])
    with pytest.raises(ValueError):
        lattice_shift(torus, (0, 0))
    with pytest.raises(ValueError):
        lattice_shift(ellipsoid_chart(), (1, 0))


def test_descent_lowers_energy_monotonically(torus):
    S = lattice_shift(torus, (1, 1))
    u = np.arange(128)[:, None] / 128
    X = 0.3 + u * S + 0.1 * np.sin(2 * np.pi * 3 * u)
    log = DescentLog()
    Y, _ = descend_loop(torus, X, S, log=log)
    assert np.all(np.diff(log.energies) <= 1e-14)
    # straight loop energy is L^2 / 2
    assert abs(discrete_energy(torus, Y, S) - 6.5) < 1e-8


def test_equator_length_and_return_map_structure(equator):
    f, cg = equator
    assert abs(cg.length - oracles.ellipse_perimeter(1.0, 1.1)) < 1e-6
    P = linearized_poincare(f, cg)
    assert abs(P.determinant - 1) < 1e-8
    # eigenvalues come in pairs lambda, 1/lambda
    lam = P.eigenvalues
    assert abs(lam[0] * lam[1] - 1) < 1e-8
    assert P.nondegenerate


def test_iterate_squares_the_return_map(equator):
    f, cg = equator
    twice = iterate(f, cg, 2)
    assert abs(twice.length - 2 * cg.length) < 1e-8 and twice.multiplicity == 2
    P = linearized_poincare(f, cg).monodromy
    P2 = linearized_poincare(f, twice).monodromy
    np.testing.assert_allclose(P2, P @ P, atol=1e-6)
    np.testing.assert_allclose(linearized_poincare(f, cg, laps=2).monodromy, P @ P, atol=1e-6)


def test_dedup_is_idempotent(torus):
    loops = find_closed_geodesics(torus, (1, 0), init_count=3, seed=2)
    once = dedup(torus, loops + loops)
    assert len(once) == len(loops)
    assert len(dedup(torus, once)) == len(once)


def test_torus_targets_are_primitive_and_short(torus):
    ks = {t.homotopy_class for t in torus_targets(torus, 4.0)}
    assert ks == {(1, 0), (0, 1), (1, 1), (1, -1)}


def test_audit_below_second_equator_finds_one_class():
    lengths = sorted(oracles.ellipse_perimeter(a, b) for a, b in ((1.0, 1.1), (1.0, 1.3), (1.1, 1.3)))
    a = 0.5 * (lengths[0] + lengths[1])
    rep = bumpy_audit(ellipsoid_targets(), a, out_nodes=256)
    assert rep.class_count == 1 and rep.bumpy
    assert abs(rep.classes[0].length - lengths[0]) < 1e-6


def test_pipeline_without_crossings_leaves_loops_alone():
    f = flat_torus((2.0, 2.0, 2.0))
    loops = find_closed_geodesics(f, (1, 0, 0), seeds=[np.array([0.0, 0.5, 0.5])], out_nodes=512, descent=False)
    loops += find_closed_geodesics(f, (1, 0, 0), seeds=[np.array([0.0, 1.5, 0.5])], out_nodes=512, descent=False)
    rep = crossing_removal_pipeline(f, loops, 3.0, 0.25, 0.03, 0.01, tol=0.01)
    assert rep.before_events == rep.after_events == 0
    assert rep.metric is f
    for a, b in zip(rep.loops_before, rep.loops_after):
        assert np.array_equal(a.nodes, b.nodes)
    np.testing.assert_array_equal(rep.lengths_before, rep.lengths_after)
