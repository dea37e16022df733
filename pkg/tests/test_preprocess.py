import numpy as np
import pytest

from dotrecon import forward, preprocess, scenes
from dotrecon.scenes import K2_BACKGROUND as K2
from dotrecon.specfun import SourcePoint, fundamental_solution

K = np.sqrt(K2)


@pytest.fixture(scope="module")
def smoothed_clean(homogeneous_data, annulus, rim_targets):
    return preprocess.smooth_to_omega1(homogeneous_data, K2, annulus, rim_targets)


def test_smoothing_matches_analytic(smoothed_clean, layout, rim_targets):
    assert smoothed_clean.meta["smoothed"] == "true"
    for src in layout.sources:
        pos, val = smoothed_clean.trace(src.id)
        assert np.array_equal(pos, rim_targets)
        ref = fundamental_solution(pos, src.xy, K)
        assert np.max(np.abs(val / ref - 1)) <= 0.02


def test_smoothing_reduces_noise(omega0, annulus, layout, rim_targets, smoothed_clean):
    a = scenes.build_scene(scenes.PhantomScene(), omega0)
    noisy = forward.synthesize_measurements(a, layout.sources, K2, noise=0.02, seed=3)
    clean = forward.synthesize_measurements(a, layout.sources, K2, noise=0.0)
    sm = preprocess.smooth_to_omega1(noisy, K2, annulus, rim_targets)
    for i in noisy.ids:
        raw = np.sqrt(np.mean((noisy.intensities[i] / clean.intensities[i] - 1) ** 2))
        out = np.sqrt(np.mean((sm.intensities[i] / smoothed_clean.intensities[i] - 1) ** 2))
        assert out < raw
        assert out < 0.02


def test_ratio_bound_holds(smoothed_clean, omega0, annulus, layout, rim_targets):
    a = scenes.build_scene(scenes.group_scene(1, 4.0), omega0)
    data = forward.synthesize_measurements(a, layout.sources, K2, noise=0.02, seed=9)
    sm = preprocess.smooth_to_omega1(data, K2, annulus, rim_targets)
    for info in sm.bounds + smoothed_clean.bounds:
        assert 0 <= info["v_min"] and info["v_max"] <= info["v_bound"] * (1 + 1e-9)


def test_smoothing_is_jointly_homogeneous(homogeneous_data, annulus, rim_targets):
    sub = homogeneous_data.subset([2])
    base = preprocess.smooth_to_omega1(sub, K2, annulus, rim_targets, amplitude=1.0)
    scaled = preprocess.smooth_to_omega1(sub.scaled(3.0), K2, annulus, rim_targets, amplitude=3.0)
    assert np.allclose(scaled.intensities[2], 3.0 * base.intensities[2], rtol=1e-10, atol=0)


def test_smoothing_is_deterministic(homogeneous_data, annulus, rim_targets):
    sub = homogeneous_data.subset([1, 4])
    a = preprocess.smooth_to_omega1(sub, K2, annulus, rim_targets)
    b = preprocess.smooth_to_omega1(sub, K2, annulus, rim_targets)
    for i in sub.ids:
        assert np.array_equal(a.intensities[i], b.intensities[i])


def test_rim_interpolate_is_exact_on_samples():
    th = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    pos = 4.63 * np.column_stack([np.cos(th), np.sin(th)])
    val = np.exp(np.sin(th))
    assert np.allclose(preprocess.rim_interpolate(pos, val, pos), val, rtol=1e-13)


def test_calibrate_amplitude(homogeneous_data, omega0):
    A = preprocess.calibrate_amplitude(homogeneous_data, K2, omega0)
    assert A == pytest.approx(1.0, abs=1e-6)
    assert preprocess.calibrate_amplitude(homogeneous_data.scaled(2.0), K2, omega0) == 2.0 * A


def test_calibrate_amplitude_recovers_3_7(omega0):
    a = scenes.build_scene(scenes.PhantomScene(), omega0)
    data = forward.synthesize_measurements(a, [SourcePoint((20.0, 0.0), 3.7, 1)], K2, noise=0.0)
    assert preprocess.calibrate_amplitude(data, K2, omega0) == pytest.approx(3.7, abs=1e-6)


def test_calibrate_amplitude_zero_trace(omega0):
    with pytest.raises(forward.FormatError):
        forward.MeasurementSet([SourcePoint((20.0, 0.0), 1.0, 1)], {1: np.zeros((3, 2))}, {1: np.zeros(3)})
    with pytest.raises(preprocess.CalibrationError):
        preprocess._extremes(_ZeroSet(), 1)


class _ZeroSet:
    def trace(self, i):
        return np.zeros((3, 2)), np.zeros(3)


def test_calibrate_k2(homogeneous_data, omega0):
    res = preprocess.calibrate_k2(homogeneous_data.subset([1]), omega0)
    assert res.k2 == pytest.approx(2.403, abs=0.005)
    assert res.amplitude == pytest.approx(1.0, abs=1e-6)
    assert np.isfinite(res.residual) and res.iterations > 0
    five = preprocess.calibrate_k2(homogeneous_data.subset([1]).scaled(5.0), omega0)
    assert five.k2 == res.k2
    assert five.amplitude == pytest.approx(5.0 * res.amplitude, rel=1e-12)


def test_comp_ratio_increasing(homogeneous_data, omega0):
    x = homogeneous_data.subset([1])
    xmax, _, xmin, _ = preprocess._extremes(x, 1)
    src = x.source(1)
    ratios = []
    for k2 in np.linspace(1.5, 3.5, 20):
        u = preprocess._model_at(np.vstack([xmax, xmin]), src, k2, omega0, "direct")
        ratios.append(u[0] / u[1])
    assert np.all(np.diff(ratios) > 0)


def test_calibrate_k2_bracket_error(homogeneous_data, omega0):
    with pytest.raises(preprocess.BracketError) as info:
        preprocess.calibrate_k2(homogeneous_data.subset([1]), omega0, interval=(3.0, 3.5))
    assert len(info.value.samples) == 2
