"""Measurement smoothing on the annulus and background calibration."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import fem
from .forward import MeasurementSet, free_space, solve_point_source
from .mesh import INNER, OUTER, Mesh, ScalarField, boundary_nodes, interpolate_at
from .scenes import OMEGA_RADIUS
from .specfun import bessel_k0

log = logging.getLogger(__name__)


class CalibrationError(ValueError):
    pass


class BracketError(CalibrationError):
    def __init__(self, message, samples):
        super().__init__(message)
        self.samples = samples


def rim_interpolate(positions, values, targets, center=(0.0, 0.0)) -> np.ndarray:
    """Periodic interpolation of positive samples on a closed curve, linear in angle and log value."""
    positions = np.asarray(positions, dtype=float)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    th = np.arctan2(positions[:, 1] - center[1], positions[:, 0] - center[0])
    tt = np.arctan2(targets[:, 1] - center[1], targets[:, 0] - center[0])
    order = np.argsort(th, kind="stable")
    th, lv = th[order], np.log(np.asarray(values, dtype=float)[order])
    th_ext = np.concatenate([th[-1:] - 2 * np.pi, th, th[:1] + 2 * np.pi])
    lv_ext = np.concatenate([lv[-1:], lv, lv[:1]])
    return np.exp(np.interp(tt, th_ext, lv_ext))


def smooth_trace(positions, values, src, k2, annulus: Mesh, targets, amplitude=1.0,
                 method="direct", return_field=False):
    """Solve the source problem on the annulus with the data on ∂Ω and read it off at ``targets``.

    The remainder is carried as the ratio v = u / (A u₀) (see :mod:`forward`);
    v obeys a discrete maximum principle, so on the whole annulus
    0 ≤ v ≤ max(1, max over ∂Ω of φ/(A u₀)).
    """
    src = src.__class__(src.position, amplitude, src.id)
    inner = boundary_nodes(annulus, INNER)
    outer = boundary_nodes(annulus, OUTER)
    phi = rim_interpolate(positions, values, annulus.nodes[inner])
    u0 = free_space(annulus, src, k2)
    ref = u0.max()
    k = np.sqrt(k2)
    rc = np.maximum(np.linalg.norm(annulus.centroids - src.xy, axis=1), 1e-2 * annulus.h)
    kappa = (amplitude * bessel_k0(k * rc) / (2.0 * np.pi) / ref) ** 2
    tri, _ = annulus.locate(src.xy[None, :])
    if tri[0] < 0:
        raise ValueError(f"source {src.id} is outside the annulus mesh")
    hold = np.setdiff1d(annulus.triangles[tri[0]], np.concatenate([inner, outer]))
    vin = phi / u0[inner]
    fixed = np.concatenate([inner, outer, hold])
    vals = np.concatenate([vin, np.zeros(len(outer)), np.ones(len(hold))])
    prob = fem.EllipticProblem(annulus, kappa=kappa, dirichlet=(fixed, vals))
    v = fem.solve(fem.assemble(prob), method=method)
    bound = max(1.0, float(vin.max()))
    info = {"v_max": float(v.max()), "v_min": float(v.min()), "v_bound": bound}
    if v.max() > bound * (1 + 1e-9) or v.min() < -1e-12:
        raise fem.PositivityError(f"annulus solution leaves [0, {bound:.6g}]: [{v.min():.6g}, {v.max():.6g}]")
    u = ScalarField(annulus, u0 * v, "intensity")
    # the ratio is smooth up to the source, so interpolate it and not u itself
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    rt = np.linalg.norm(targets - src.xy, axis=1)
    out = interpolate_at(ScalarField(annulus, v, "dimensionless"), targets) * amplitude * bessel_k0(k * rt) / (2.0 * np.pi)
    if not np.all(out > 0):
        raise fem.PositivityError(f"smoothed trace of source {src.id} is not positive")
    return (out, info, u) if return_field else (out, info)


def smooth_to_omega1(measurements: MeasurementSet, k2: float, annulus: Mesh, targets,
                     amplitude: float = 1.0, method: str = "direct") -> MeasurementSet:
    """Smoothed traces φ̄ at ``targets`` (normally the ordered ∂Ω₁ nodes)."""
    targets = np.asarray(targets, dtype=float)
    pos, val = {}, {}
    bounds = []
    for p in measurements.sources:
        x, v = measurements.trace(p.id)
        out, info = smooth_trace(x, v, p, k2, annulus, targets, amplitude, method)
        pos[p.id] = targets.copy()
        val[p.id] = out
        bounds.append(info)
        log.debug("source %d smoothed, ratio range [%.3g, %.3g] bound %.3g", p.id, info["v_min"], info["v_max"], info["v_bound"])
    meta = dict(measurements.meta)
    meta.update(surface="omega1", smoothed="true", k2_smoothing=repr(float(k2)), amplitude=repr(float(amplitude)))
    out = MeasurementSet(list(measurements.sources), pos, val, meta)
    out.bounds = bounds
    return out


@dataclass
class CalibrationResult:
    amplitude: float
    k2: float
    residual: float
    x_max: tuple
    x_min: tuple
    iterations: int = 0


def _extremes(measured: MeasurementSet, source_id: int):
    x, v = measured.trace(source_id)
    if not np.any(v > 0):
        raise CalibrationError("source trace is all zero")
    i, j = int(np.argmax(v)), int(np.argmin(v))
    return x[i], v[i], x[j], v[j]


def _model_at(points, src, k2, omega0: Mesh, method):
    a = ScalarField(omega0, np.full(omega0.n_nodes, k2), "coefficient")
    u = solve_point_source(a, src.__class__(src.position, 1.0, src.id), k2, method=method)
    lv = ScalarField(omega0, np.log(np.maximum(u.values, 1e-300)), "log-intensity")
    return np.exp(interpolate_at(lv, points))


def calibrate_amplitude(measured: MeasurementSet, k2: float, omega0: Mesh, source_id: int = None,
                        method: str = "direct") -> float:
    """A = u_meas(x_max) / u_comp(x_max) for the homogeneous model with unit amplitude."""
    sid = measured.ids[0] if source_id is None else source_id
    xmax, vmax, _, _ = _extremes(measured, sid)
    comp = _model_at(xmax[None, :], measured.source(sid), k2, omega0, method)[0]
    return float(vmax / comp)


def calibrate_k2(measured: MeasurementSet, omega0: Mesh, interval=(1.5, 3.5), source_id: int = None,
                 rtol: float = 1e-10, method: str = "direct") -> CalibrationResult:
    """Background k² matching the bright/dim ratio of one source trace, then the amplitude."""
    sid = measured.ids[0] if source_id is None else source_id
    src = measured.source(sid)
    xmax, vmax, xmin, vmin = _extremes(measured, sid)
    target = np.log(vmax / vmin)
    pts = np.vstack([xmax, xmin])

    def gap(k2):
        u = _model_at(pts, src, k2, omega0, method)
        return float(np.log(u[0] / u[1]) - target)

    lo, hi = float(interval[0]), float(interval[1])
    if not 0 < lo < hi:
        raise ValueError("interval must satisfy 0 < lo < hi")
    glo, ghi = gap(lo), gap(hi)
    if glo * ghi > 0:
        raise BracketError(f"no sign change of R_comp - R_meas on [{lo}, {hi}]: "
                           f"log-ratio gaps {glo:.4g}, {ghi:.4g}", {lo: glo, hi: ghi})
    it = 0
    while hi - lo > rtol * 0.5 * (hi + lo):
        mid = 0.5 * (lo + hi)
        gm = gap(mid)
        it += 1
        if gm == 0:
            lo = hi = mid
            break
        if (gm < 0) == (glo < 0):
            lo, glo = mid, gm
        else:
            hi, ghi = mid, gm
    k2 = 0.5 * (lo + hi)
    res = gap(k2)
    amp = calibrate_amplitude(measured, k2, omega0, sid, method)
    return CalibrationResult(amp, k2, res, tuple(map(float, xmax)), tuple(map(float, xmin)), it)
