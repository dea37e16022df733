import math
import time
from decimal import Decimal, getcontext

import numpy as np
import pytest
from scipy import special

from dotrecon.specfun import (DomainError, SingularityError, SourcePoint, _bessel_k1, bessel_k0,
                              fundamental_solution, w0_asymptotic)

from conftest import k0_series


@pytest.mark.parametrize("y, ref", [(0.5, 0.92441907122766), (1.0, 0.42102443824071)])
def test_k0_reference_values(y, ref):
    assert bessel_k0(y) == pytest.approx(k0_series(y), rel=1e-12)
    assert bessel_k0(y) == pytest.approx(ref, rel=1e-12)


def test_k0_matches_series_on_small_arguments():
    ys = np.geomspace(1e-6, 2.0, 400)
    ours = bessel_k0(ys)
    oracle = np.array([k0_series(y) for y in ys])
    assert np.max(np.abs(ours / oracle - 1)) <= 1e-10


def test_k0_wide_range_against_scipy():
    ys = np.geomspace(2.0, 700.0, 500)
    ref = special.k0(ys)
    assert np.max(np.abs(bessel_k0(ys) / ref - 1)) <= 1e-10


def test_k0_large_argument_asymptotic():
    y = 30.0
    asym = math.sqrt(math.pi / (2 * y)) * math.exp(-y)
    assert abs(bessel_k0(y) / asym - 1) < 0.02


def test_k0_underflows_quietly():
    assert bessel_k0(800.0) == 0.0
    assert bessel_k0(np.array([1.0, 900.0]))[1] == 0.0


@pytest.mark.parametrize("bad", [0.0, -1.0, np.nan])
def test_k0_domain(bad):
    with pytest.raises(DomainError):
        bessel_k0(bad)


def test_k0_positive_and_decreasing():
    ys = np.geomspace(1e-6, 700.0, 1000)
    v = bessel_k0(ys)
    assert np.all(v > 0)
    assert np.all(np.diff(v) < 0)


def test_k0_derivative_is_minus_k1():
    ys = np.geomspace(0.1, 50.0, 200)
    d = 1e-5 * ys
    fd = (bessel_k0(ys + d) - bessel_k0(ys - d)) / (2 * d)
    k1 = _bessel_k1(ys)
    assert np.max(np.abs(fd / -k1 - 1)) <= 1e-6
    assert np.max(np.abs(k1 / special.k1(ys) - 1)) <= 1e-10


def test_fundamental_solution_values():
    # (1/2π) K0(1) = 0.0670081205..., (1/2π) K0(0.5) = 0.147126
    assert fundamental_solution((1.0, 0.0), (0.0, 0.0), 1.0) == pytest.approx(k0_series(1.0) / (2 * math.pi), rel=1e-12)
    assert fundamental_solution((1.0, 0.0), (0.0, 0.0), 1.0) == pytest.approx(0.0670081205, rel=1e-9)
    assert fundamental_solution((0.3, 0.4), (0.0, 0.0), 1.0) == pytest.approx(0.147126, rel=1e-5)


def test_fundamental_solution_symmetry_and_scaling():
    x, x0 = np.array([1.3, -0.7]), np.array([-2.0, 4.1])
    assert fundamental_solution(x, x0, 1.55) == fundamental_solution(x0, x, 1.55)
    k, kp = 1.55, 0.8
    r = np.linalg.norm(x - x0)
    scaled = x0 + (x - x0) * (k / kp)
    assert fundamental_solution(scaled, x0, kp) == pytest.approx(fundamental_solution(x, x0, k), rel=1e-13)
    assert r > 0


def test_fundamental_solution_errors():
    with pytest.raises(SingularityError):
        fundamental_solution((1.0, 2.0), (1.0, 2.0), 1.0)
    with pytest.raises(DomainError):
        fundamental_solution((1.0, 2.0), (0.0, 0.0), 0.0)


def test_w0_asymptotic():
    assert w0_asymptotic(1.0, 0.0) == pytest.approx(0.1994711402, rel=1e-10)
    getcontext().prec = 40
    s, k = Decimal(20), Decimal("1.5502")
    ref = (-k * s).exp() / (2 * (2 * Decimal(math.pi) * s).sqrt())
    assert w0_asymptotic(20.0, 1.5502) == pytest.approx(float(ref), rel=1e-12)
    assert w0_asymptotic(8.0, 1.5502) > w0_asymptotic(20.0, 1.5502)
    with pytest.raises(DomainError):
        w0_asymptotic(0.0, 1.0)


def test_source_point():
    p = SourcePoint((3.0, 4.0), 2.0, 1)
    assert p.s == 5.0
    with pytest.raises(DomainError):
        SourcePoint((0.0, 0.0))
    with pytest.raises(DomainError):
        SourcePoint((1.0, 0.0), 0.0)


def test_runtime_budget():
    t = time.perf_counter()
    bessel_k0(np.geomspace(1e-6, 700.0, 10000))
    assert time.perf_counter() - t < 1.0
