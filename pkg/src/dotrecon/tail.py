"""Tail function: asymptotic first guess from the four far sources, then fixed-point refinement."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .forward import solve_point_source
from .mesh import OUTER, Mesh, ScalarField, boundary_nodes, interpolate_at, l2_inner
from .preprocess import rim_interpolate

log = logging.getLogger(__name__)

LN_2SQRT2PI = float(np.log(2.0 * np.sqrt(2.0 * np.pi)))
EDGE_DEGREE = 6


class AsymptoticValidityError(ValueError):
    """1 + p∞ ≤ 0 somewhere on an edge."""


@dataclass
class TailResult:
    T: ScalarField
    a_stage1: ScalarField
    a_final: ScalarField
    m1: int
    history: list = field(default_factory=list)
    p_inf: dict = field(default_factory=dict)

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "ratio"])
            for m, r in self.history:
                w.writerow([m, repr(float(r))])


def p_infinity(log_phi, S, k, variant="consistent"):
    """Invert the large-distance asymptotics of ln u for the bounded correction p∞."""
    if variant == "consistent":
        return log_phi + k * S + LN_2SQRT2PI + 0.5 * np.log(S)
    if variant == "printed":
        return log_phi + k * S + 0.5 * np.log(np.pi / (2.0 * S))
    raise ValueError("variant must be 'consistent' or 'printed'")


def nearest_edge(src_xy, half_width):
    """Axis (0 for x, 1 for z) and side (+1/-1) of the square edge facing the source."""
    axis = int(np.argmax(np.abs(src_xy)))
    return axis, float(np.sign(src_xy[axis]))


def extended_p_inf(mesh: Mesh, trace_pos, trace_val, src, k, variant="consistent", degree=EDGE_DEGREE):
    """p∞ on the edge of Ω₁ facing ``src``, extended constantly along the normal to that edge.

    The edge samples are replaced by their least-squares Legendre fit of
    ``degree`` (None keeps them as they are): the recovery differentiates the
    extension twice, and interpolation ripples in the data would otherwise
    dominate.  Returns the nodal field and the raw edge samples.
    """
    half = float(np.abs(mesh.nodes).max())
    axis, side = nearest_edge(src.xy, half)
    along = 1 - axis
    pos = np.asarray(trace_pos, dtype=float)
    on_edge = np.abs(pos[:, axis] - side * half) <= 1e-9 * max(1.0, half)
    if on_edge.sum() < 2:
        raise ValueError(f"no trace samples on the edge facing source {src.id}")
    ep = pos[on_edge]
    S = np.linalg.norm(ep - src.xy, axis=1)
    p = p_infinity(np.log(trace_val[on_edge]), S, k, variant)
    order = np.argsort(ep[:, along])
    t, p_sorted = ep[order, along], p[order]
    if degree is None:
        nodal = np.interp(mesh.nodes[:, along], t, p_sorted)
    else:
        fit = np.polynomial.Legendre.fit(t, p_sorted, min(degree, len(t) - 1))
        nodal = fit(np.clip(mesh.nodes[:, along], t[0], t[-1]))
    return nodal, p_sorted


def asymptotic_field(mesh: Mesh, p_nodal, src, k):
    S = np.linalg.norm(mesh.nodes - src.xy, axis=1)
    return -k * S - LN_2SQRT2PI - 0.5 * np.log(S) + p_nodal


def stage1_tail(smoothed, sources, far_source, k2: float, mesh: Mesh, omega0: Mesh,
                variant: str = "consistent", method: str = "direct", degree=EDGE_DEGREE):
    """First tail guess ``T₁`` and the averaged, clamped coefficient ``a₁`` on Ω₁.

    ``smoothed`` holds traces on ∂Ω₁ for every source in ``sources``; the
    forward solve for ``far_source`` runs on ``omega0`` with ``a₁`` inside
    Ω₁ and the background elsewhere.
    """
    k = np.sqrt(k2)
    coeffs = []
    p_edges = {}
    for src in sorted(sources, key=lambda p: p.id):
        pos, val = smoothed.trace(src.id)
        p_nodal, p_edge = extended_p_inf(mesh, pos, val, src, k, variant, degree)
        if np.any(1.0 + p_edge <= 0):
            raise AsymptoticValidityError(f"source {src.id}: 1 + p_inf = {1 + p_edge.min():.4g} <= 0")
        p_edges[src.id] = p_edge
        log.debug("source %d: p_inf in [%.4g, %.4g]", src.id, p_edge.min(), p_edge.max())
        u = np.exp(asymptotic_field(mesh, p_nodal, src, k))
        coeffs.append(fem.recover_coefficient(u, k2, mesh, clamp=False).values)
    a_bar = np.mean(np.vstack(coeffs), axis=0)
    a1 = ScalarField(mesh, fem.extend_to_boundary(mesh, np.maximum(a_bar, k2)), "coefficient", {"k2": k2})
    u = far_solution(a1, far_source, k2, omega0, method)
    T1 = ScalarField(mesh, np.log(u) / far_source.s ** 2, "dimensionless")
    return T1, a1, p_edges


def far_solution(a1: ScalarField, src, k2, omega0: Mesh, method="direct") -> np.ndarray:
    """Forward solve on Ω₀ with ``a1`` on Ω₁ (background outside), returned at the Ω₁ nodes."""
    m1 = a1.mesh
    lo, hi = m1.nodes.min(axis=0), m1.nodes.max(axis=0)
    a0 = np.full(omega0.n_nodes, k2)
    inside = np.all((omega0.nodes >= lo - 1e-12) & (omega0.nodes <= hi + 1e-12), axis=1)
    a0[inside] = interpolate_at(a1, omega0.nodes[inside])
    u0 = solve_point_source(ScalarField(omega0, np.maximum(a0, k2), "coefficient"),
                            src.__class__(src.position, 1.0, src.id), k2, method=method)
    lv = ScalarField(omega0, np.log(np.maximum(u0.values, 1e-300)), "log-intensity")
    return np.exp(interpolate_at(lv, m1.nodes))


def _solve_dirichlet(mesh, c, f, bnd, values, method):
    prob = fem.EllipticProblem(mesh, c=c, f=f, dirichlet=(bnd, values))
    return fem.solve(fem.assemble(prob), method=method)


def stage2_refine(T1: ScalarField, a1: ScalarField, phi_far, s_far: float, k2: float,
                  eps: float = 1e-5, max_iter: int = 100, method: str = "direct") -> TailResult:
    """Refine the tail with the far-source trace ``phi_far`` on the boundary nodes of Ω₁.

    ``phi_far`` is either a nodal vector on the boundary loop (ordered as
    :func:`boundary_nodes`) or a ``(positions, values)`` pair.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    mesh = a1.mesh
    if np.any(a1.values < k2):
        raise ValueError("a1 must be >= k2")
    bnd = boundary_nodes(mesh, OUTER)
    if isinstance(phi_far, tuple):
        data = rim_interpolate(phi_far[0], phi_far[1], mesh.nodes[bnd])
    else:
        data = np.asarray(phi_far, dtype=float)
    prev = a1.values
    u = _solve_dirichlet(mesh, prev, 0.0, bnd, data, method)
    a = fem.recover_coefficient(u, k2, mesh).values
    history = []
    m = 2
    while True:
        ratio = np.sqrt(l2_inner(mesh, a - prev, a - prev) / l2_inner(mesh, prev, prev))
        history.append((m, ratio))
        log.debug("stage 2: m=%d ratio=%.3e", m, ratio)
        if not np.isfinite(ratio):
            raise fem.NonConvergenceError("stage-2 ratio is not finite", ratio, history)
        if ratio <= eps:
            break
        if m >= max_iter:
            raise fem.NonConvergenceError(f"stage 2 did not reach eps={eps} in {max_iter} steps", ratio, history)
        # Δw − a_m w = (a_m − a_{m−1}) u_{m−1},  w = 0 on ∂Ω₁
        w = _solve_dirichlet(mesh, a, (a - prev) * u, bnd, 0.0, method)
        u = u + w
        if np.any(~(u > 0)):
            raise fem.PositivityError(f"u_{m} is not positive at {int(np.sum(~(u > 0)))} nodes")
        prev, a = a, fem.recover_coefficient(u, k2, mesh).values
        m += 1
    if np.any(~(u > 0)):
        raise fem.PositivityError("final u is not positive")
    T = ScalarField(mesh, np.log(u) / s_far ** 2, "dimensionless", {"m1": m})
    return TailResult(T, a1, ScalarField(mesh, a, "coefficient"), m, history)
