import csv

import numpy as np
import pytest

from dotrecon import fem, forward, preprocess, scenes, tail
from dotrecon.mesh import OUTER, ScalarField, boundary_nodes, square_grid
from dotrecon.scenes import K2_BACKGROUND as K2
from dotrecon.specfun import fundamental_solution

K = np.sqrt(K2)


def _smoothed(scene, omega0, annulus, layout, targets, noise=0.0):
    a = scenes.build_scene(scene, omega0)
    data = forward.synthesize_measurements(a, layout.sources, K2, noise=noise, seed=1, method="direct")
    return preprocess.smooth_to_omega1(data, K2, annulus, targets)


@pytest.fixture(scope="module")
def hom(omega0, annulus, layout, rim_targets):
    return _smoothed(scenes.PhantomScene(), omega0, annulus, layout, rim_targets)


@pytest.fixture(scope="module")
def c3(omega0, annulus, layout, rim_targets):
    return _smoothed(scenes.group_scene(1, 3.0), omega0, annulus, layout, rim_targets)


def _tail_sources(layout):
    return [layout.far] + list(layout.tail)


def _stage1(sm, layout, m1, omega0, **kw):
    return tail.stage1_tail(sm, _tail_sources(layout), layout.far, K2, m1, omega0, **kw)


def test_p_infinity_variants():
    S = np.array([10.0, 20.0])
    lw = np.log(fundamental_solution(np.column_stack([S, 0 * S]), (0.0, 0.0), K))
    p = tail.p_infinity(lw, S, K)
    # the large-distance form carries no k^(-1/2), so p tends to -ln(k)/2
    assert np.all(np.abs(p + 0.5 * np.log(K)) < 0.01)
    printed = tail.p_infinity(lw, S, K, "printed")
    assert np.allclose(printed - p, 0.5 * np.log(np.pi / (2 * S)) - tail.LN_2SQRT2PI - 0.5 * np.log(S))
    with pytest.raises(ValueError):
        tail.p_infinity(lw, S, K, "other")


def test_nearest_edge():
    assert tail.nearest_edge(np.array([20.0, 0.0]), 5.83) == (0, 1.0)
    assert tail.nearest_edge(np.array([0.0, -20.0]), 5.83) == (1, -1.0)


def test_stage1_homogeneous_tail(hom, layout, omega1, omega0):
    T1, a1, p_edges = _stage1(hom, layout, omega1, omega0)
    ref = np.log(fundamental_solution(omega1.nodes, layout.far.xy, K)) / layout.far.s ** 2
    assert np.max(np.abs(T1.values / ref - 1)) <= 0.02
    assert a1.values.min() >= K2
    assert sorted(p_edges) == [1, 4, 5, 6]
    assert all(np.all(1 + p > 0) for p in p_edges.values())


def test_stage1_homogeneous_coefficient_fine_grid(omega0, annulus, layout):
    fine = square_grid(5.83, 100)
    sm = _smoothed(scenes.PhantomScene(), omega0, annulus, layout, fine.nodes[boundary_nodes(fine, OUTER)])
    _, a1, _ = _stage1(sm, layout, fine, omega0)
    assert np.max(np.abs(a1.values / K2 - 1)) <= 0.01


@pytest.mark.xfail(strict=True, reason="five-point truncation k^2 h^2 / 12 = 1.09 % alone exceeds the 1 % band at h = 0.233")
def test_stage1_homogeneous_coefficient_default_grid(hom, layout, omega1, omega0):
    _, a1, _ = _stage1(hom, layout, omega1, omega0)
    assert np.max(np.abs(a1.values / K2 - 1)) <= 0.01


def test_stage1_argmax_near_inclusion(c3, layout, omega1, omega0):
    _, a1, _ = _stage1(c3, layout, omega1, omega0)
    peak = omega1.nodes[np.argmax(a1.values)]
    assert np.hypot(peak[0] - 0.0, peak[1] - 1.5) <= 2.0


def test_stage1_order_invariance(c3, layout, omega1, omega0):
    srcs = _tail_sources(layout)
    _, a, _ = tail.stage1_tail(c3, srcs, layout.far, K2, omega1, omega0)
    _, b, _ = tail.stage1_tail(c3, srcs[::-1], layout.far, K2, omega1, omega0)
    assert np.array_equal(a.values, b.values)


def test_stage1_scale_invariance(c3, layout, omega1, omega0):
    T1, a, _ = _stage1(c3, layout, omega1, omega0)
    T2, b, _ = _stage1(c3.scaled(1.7), layout, omega1, omega0)
    assert np.allclose(a.values, b.values, rtol=1e-8, atol=0)
    assert np.allclose(T2.values, T1.values, rtol=1e-12, atol=1e-12)


def test_stage1_validity_error(hom, layout, omega1, omega0):
    with pytest.raises(tail.AsymptoticValidityError):
        _stage1(hom.scaled(np.exp(-5.0)), layout, omega1, omega0)


def test_stage1_printed_variant_violates_positivity(hom, layout, omega1, omega0):
    # the printed inversion is off by about -4, which pushes 1 + p below zero
    with pytest.raises(tail.AsymptoticValidityError):
        _stage1(hom, layout, omega1, omega0, variant="printed")


def test_stage2_homogeneous_fixed_point(hom, layout, omega1, omega0):
    T1, _, _ = _stage1(hom, layout, omega1, omega0)
    a1 = ScalarField(omega1, np.full(omega1.n_nodes, K2), "coefficient")
    res = tail.stage2_refine(T1, a1, hom.intensities[layout.far.id], layout.far.s, K2, eps=1e-5)
    assert res.m1 <= 2
    assert np.max(np.abs(res.T.values / T1.values - 1)) <= 0.01
    ratios = [r for _, r in res.history]
    assert np.all(np.isfinite(ratios)) and ratios[-1] <= 1e-5


def test_stage2_history_and_bounds(c3, layout, omega1, omega0, tmp_path):
    T1, a1, _ = _stage1(c3, layout, omega1, omega0)
    pos, val = c3.trace(layout.far.id)
    res = tail.stage2_refine(T1, a1, (pos, val), layout.far.s, K2)
    assert res.history[-1][1] <= 1e-5
    assert res.a_final.values.min() >= K2
    res.write_history(tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["m", "ratio"] and len(rows) == len(res.history) + 1


def test_stage2_stops_after_one_step(c3, layout, omega1):
    # recovery inverts the lumped forward solve exactly, so a_2 reproduces a_1
    pos, val = c3.trace(layout.far.id)
    T0 = ScalarField(omega1, np.zeros(omega1.n_nodes))
    a0 = ScalarField(omega1, np.full(omega1.n_nodes, 2 * K2), "coefficient")
    res = tail.stage2_refine(T0, a0, (pos, val), layout.far.s, K2, eps=1e-5)
    assert res.m1 == 2 and res.history[-1][1] <= 1e-9
    with pytest.raises(fem.NonConvergenceError) as info:
        tail.stage2_refine(T0, a0, (pos, val), layout.far.s, K2, eps=1e-15, max_iter=2)
    assert info.value.history


def test_stage2_preconditions(hom, layout, omega1):
    T0 = ScalarField(omega1, np.zeros(omega1.n_nodes))
    a = ScalarField(omega1, np.full(omega1.n_nodes, K2), "coefficient")
    phi = hom.intensities[layout.far.id]
    with pytest.raises(ValueError):
        tail.stage2_refine(T0, a, phi, 20.0, K2, eps=0.1)
    low = ScalarField(omega1, np.full(omega1.n_nodes, 0.5 * K2), "coefficient")
    with pytest.raises(ValueError):
        tail.stage2_refine(T0, low, phi, 20.0, K2)
