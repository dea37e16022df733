"""Layer stripping in the source distance s and the final coefficient recovery.

With w = s⁻² ln u and q = ∂ₛw taken piecewise constant on the knots
s̄ = s₀ > s₁ > … > s_N = s̲, the interval-integrated equation for q_n is

    Δq_n + A2 G·∇q_n − A1 |∇q_n|² = A3 ΔH + A4 |G|² − A3 ΔT,

with H = h Σ_{j<n} q_j and G = ∇H − ∇T.  The quadratic term is dropped and the
rest is solved weakly for p_n = q_n − Ψ_n, Ψ_n the harmonic lift of the
boundary data ψ_n.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse as sp
from scipy.sparse.csgraph import connected_components

from . import fem
from .mesh import OUTER, Mesh, ScalarField, boundary_nodes, interpolate_at
from .preprocess import rim_interpolate


class GridError(ValueError):
    pass


class RangeError(OverflowError):
    pass


@dataclass(frozen=True)
class SGrid:
    s_far: float
    s_near: float
    h: float
    N: int

    def __post_init__(self):
        if not self.s_far > 2.0:
            raise GridError(f"s_far must exceed 2, got {self.s_far}")
        if not self.s_near > 0.0 or not self.h > 0.0 or self.N < 1:
            raise GridError("need s_near > 0, h > 0 and N >= 1")
        if abs(self.s_far - self.N * self.h - self.s_near) > 1e-9 * self.s_far:
            raise GridError("knots must satisfy s_far - N h = s_near")
        for n in range(1, self.N + 1):
            check_bounds(strip_coefficients(n, self), self)

    @classmethod
    def from_knots(cls, knots) -> "SGrid":
        k = np.asarray(knots, dtype=float)
        d = -np.diff(k)
        if len(k) < 2 or np.any(d <= 0) or not np.allclose(d, d[0], rtol=1e-9):
            raise GridError("knots must decrease with a constant step")
        return cls(float(k[0]), float(k[-1]), float(d[0]), len(k) - 1)

    @property
    def knots(self) -> np.ndarray:
        return self.s_far - self.h * np.arange(self.N + 1)


@dataclass(frozen=True)
class StripCoefficients:
    n: int
    A1: float
    A2: float
    A3: float
    A4: float
    I0: float
    I2: float
    I3: float
    I4: float
    I5: float
    L: float


def strip_coefficients(n: int, grid: SGrid) -> StripCoefficients:
    """Closed-form coefficients for interval ``[s_n, s_{n-1}]``."""
    if not 1 <= n <= grid.N:
        raise GridError(f"interval index {n} outside 1..{grid.N}")
    a = grid.s_far - n * grid.h
    b = a + grid.h
    h = b - a
    L = np.log(b / a)
    I0 = 3.0 * h - 2.0 * b * L
    if not I0 > 0:
        raise GridError(f"I0 = {I0:.4g} <= 0 on interval {n}; the step is too large for these distances")
    I2 = (b ** 3 - a ** 3) / 3.0
    I3 = b * (b ** 3 - a ** 3) / 3.0 - (b ** 4 - a ** 4) / 4.0
    # ∫ s (b − s)² ds and ∫ s (b − s) ds over [a, b]
    I4 = h ** 3 * (4.0 * a + h) / 12.0
    I5 = h ** 2 * (3.0 * a + h) / 6.0
    return StripCoefficients(
        n=n,
        A1=(2.0 * I3 - 4.0 * I4) / I0,
        A2=(8.0 * I5 - 2.0 * I2) / I0,
        A3=2.0 * L / I0,
        A4=-2.0 * (b ** 2 - a ** 2) / I0,
        I0=I0, I2=I2, I3=I3, I4=I4, I5=I5, L=L,
    )


def check_bounds(c: StripCoefficients, grid: SGrid) -> None:
    lim = 8.0 * grid.s_far ** 2
    for name in ("A2", "A3", "A4"):
        if abs(getattr(c, name)) > lim:
            raise GridError(f"|{name}| = {abs(getattr(c, name)):.4g} exceeds 8 s_far^2 = {lim:.4g} on interval {c.n}")
    if abs(c.A1) > 2.0 * grid.s_far ** 2 * grid.h:
        raise GridError(f"|A1| = {abs(c.A1):.4g} exceeds 2 s_far^2 h on interval {c.n}")


# ---------------------------------------------------------------- boundary data


def compute_psi(smoothed, grid: SGrid, source_ids, targets=None):
    """ψ_n = [v(s_{n−1}) − v(s_n)] / h with v = s⁻² ln φ̄, one array per interval.

    ``source_ids[i]`` is the source at knot ``s_i``.  Traces are read at
    ``targets`` (default: the positions of the first trace).
    """
    if len(source_ids) != grid.N + 1:
        raise GridError(f"need {grid.N + 1} line sources, got {len(source_ids)}")
    if targets is None:
        targets = smoothed.trace(source_ids[0])[0]
    v = []
    for s, sid in zip(grid.knots, source_ids):
        pos, val = smoothed.trace(sid)
        if not np.all(val > 0):
            raise fem.PositivityError(f"non-positive intensity in the trace of source {sid}")
        if len(pos) == len(targets) and np.allclose(pos, targets, atol=1e-9):
            phi = val
        else:
            phi = rim_interpolate(pos, val, targets)
        v.append(np.log(phi) / s ** 2)
    return [(v[n - 1] - v[n]) / grid.h for n in range(1, grid.N + 1)]


# ---------------------------------------------------------------- state and solves


@dataclass
class StrippingState:
    mesh: Mesh
    T: ScalarField
    q: list = field(default_factory=list)
    h: float = 0.0

    @property
    def H(self) -> np.ndarray:
        """h Σ_{j<n} q_j at the nodes."""
        if not self.q:
            return np.zeros(self.mesh.n_nodes)
        return self.h * np.sum([qj.values for qj in self.q], axis=0)

    def G(self) -> np.ndarray:
        grads = self.mesh.gradients
        H = self.H
        T = self.T.values
        gH = np.einsum("ti,tid->td", H[self.mesh.triangles], grads)
        gT = np.einsum("ti,tid->td", T[self.mesh.triangles], grads)
        return gH - gT


def harmonic_lift(mesh: Mesh, psi_boundary, method="direct") -> np.ndarray:
    bnd = boundary_nodes(mesh, OUTER)
    prob = fem.EllipticProblem(mesh, dirichlet=(bnd, psi_boundary))
    return fem.solve(fem.assemble(prob), method=method)


def qn_operator(state: StrippingState, coeffs: StripCoefficients):
    """Matrix of  ∫∇p·∇η − A2 ∫(G·∇p) η  on all nodes, and the convection field used."""
    b = -coeffs.A2 * state.G()
    return fem.stiffness(state.mesh) + fem.convection(state.mesh, b), b


def qn_load(state: StrippingState, coeffs: StripCoefficients) -> np.ndarray:
    """Right-hand side  A3∫∇H·∇η − A4∫|G|²η − A3∫∇T·∇η  (ΔH and ΔT moved onto η)."""
    m = state.mesh
    K = fem.stiffness(m)
    G = state.G()
    g2 = np.einsum("td,td->t", G, G) * m.areas / 3.0
    sq = np.zeros(m.n_nodes)
    np.add.at(sq, m.triangles, np.repeat(g2[:, None], 3, axis=1))
    return coeffs.A3 * (K @ state.H) - coeffs.A4 * sq - coeffs.A3 * (K @ state.T.values)


def _a1_load(mesh: Mesh, q: np.ndarray, A1: float) -> np.ndarray:
    """Lumped ``A1 ∫|∇q|² η`` from a frozen q."""
    g = np.einsum("ti,tid->td", q[mesh.triangles], mesh.gradients)
    t = A1 * np.einsum("td,td->t", g, g) * mesh.areas / 3.0
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.triangles, np.repeat(t[:, None], 3, axis=1))
    return out


def solve_qn(state: StrippingState, n: int, coeffs: StripCoefficients, psi_n, method="direct",
             frozen=None, record=True) -> ScalarField:
    """q_n = p_n + Ψ_n with Ψ_n harmonic and p_n = 0 on the boundary.

    The quadratic A1 term is dropped unless ``frozen`` gives a previous q_n,
    in which case it enters the load with that q_n held fixed.
    """
    mesh = state.mesh
    bnd = boundary_nodes(mesh, OUTER)
    Psi = harmonic_lift(mesh, psi_n, method)
    A, b = qn_operator(state, coeffs)
    rhs = qn_load(state, coeffs) - A @ Psi
    if frozen is not None:
        rhs = rhs - _a1_load(mesh, np.asarray(frozen, dtype=float), coeffs.A1)
    # ∫∇p∇η + ∫(b·∇p)η = rhs  is  Δp − b·∇p = f  with  −∫fη = rhs
    prob = fem.EllipticProblem(mesh, b=b, load=-rhs, dirichlet=(bnd, 0.0))
    try:
        p = fem.solve(fem.assemble(prob), method=method)
    except fem.NonConvergenceError as exc:
        raise fem.NonConvergenceError(f"interval {n}: {exc}", exc.residual, exc.history) from exc
    q = ScalarField(mesh, p + Psi, "dimensionless", {"n": n})
    if record:
        state.q.append(q)
    return q


def a1_sensitivity(state: StrippingState, n: int, coeffs: StripCoefficients, psi_n, q: ScalarField,
                   method="direct") -> float:
    """Relative change of ‖∇q_n‖ after one fixed-point pass with the A1 term restored.

    ``state`` must hold q_1..q_{n−1} only.
    """
    q2 = solve_qn(state, n, coeffs, psi_n, method, frozen=q.values, record=False)
    g0 = _grad_norm(q)
    return abs(_grad_norm(q2) - g0) / g0


def _grad_norm(q: ScalarField) -> float:
    m = q.mesh
    g = np.einsum("ti,tid->td", q.values[m.triangles], m.gradients)
    return float(np.sqrt(np.sum(np.einsum("td,td->t", g, g) * m.areas)))


def assemble_w(state: StrippingState, grid: SGrid) -> ScalarField:
    """w(x, s̲) = −h Σ q_j + T."""
    w = state.T.values - grid.h * np.sum([q.values for q in state.q], axis=0) if state.q else state.T.values.copy()
    return ScalarField(state.mesh, w, "dimensionless")


def finalize(w: ScalarField, grid: SGrid, k2: float, omega_mesh: Mesh = None) -> ScalarField:
    """a = max(recovered, k2) from u = exp(s̲² w), optionally moved to the Ω mesh."""
    lnu = grid.s_near ** 2 * w.values
    if np.max(np.abs(lnu)) > 700:
        raise RangeError(f"exp overflow: max |s^2 w| = {np.max(np.abs(lnu)):.4g}")
    a = fem.recover_coefficient(np.exp(lnu), k2, w.mesh)
    if omega_mesh is None:
        return a
    vals = np.maximum(interpolate_at(a, omega_mesh.nodes), k2)
    return ScalarField(omega_mesh, vals, "coefficient", {"k2": k2})


def reconstruct(smoothed, grid: SGrid, line_ids, T: ScalarField, k2: float, omega_mesh=None, method="direct"):
    """Full sweep n = 1..N; returns (a, state, psi)."""
    mesh = T.mesh
    bnd = boundary_nodes(mesh, OUTER)
    psi = compute_psi(smoothed, grid, line_ids, mesh.nodes[bnd])
    state = StrippingState(mesh, T, [], grid.h)
    for n in range(1, grid.N + 1):
        solve_qn(state, n, strip_coefficients(n, grid), psi[n - 1], method)
    w = assemble_w(state, grid)
    return finalize(w, grid, k2, omega_mesh), state, psi


# ---------------------------------------------------------------- metrics


def metrics(a: ScalarField, truth, k2: float = None) -> dict:
    """Recovered contrast, its relative error and the thresholded-region geometry."""
    mesh = a.mesh
    kb = truth.background_k2 if k2 is None else k2
    amax = float(a.values.max())
    contrast = amax / kb
    true_c = max((inc.contrast for inc in truth.inclusions), default=1.0)
    rel = abs(contrast - true_c) / true_c if np.isfinite(true_c) else None
    level = 0.5 * (kb + amax)
    mask = a.values > level
    comps = []
    if mask.any() and amax > kb * (1 + 1e-9):
        e, _ = mesh.edges()
        keep = mask[e[:, 0]] & mask[e[:, 1]]
        idx = np.flatnonzero(mask)
        renum = -np.ones(mesh.n_nodes, dtype=np.int64)
        renum[idx] = np.arange(len(idx))
        ee = renum[e[keep]]
        g = sp.coo_matrix((np.ones(len(ee)), (ee[:, 0], ee[:, 1])), shape=(len(idx), len(idx)))
        ncomp, labels = connected_components(g, directed=False)
        wts = fem.lumped_mass(mesh)[idx]
        for c in range(ncomp):
            sel = labels == c
            w = wts[sel]
            ctr = (mesh.nodes[idx[sel]] * w[:, None]).sum(0) / w.sum()
            comps.append({"centroid": [float(ctr[0]), float(ctr[1])], "area": float(w.sum()), "nodes": int(sel.sum())})
        comps.sort(key=lambda c: (-c["area"], c["centroid"]))
    if comps:
        tot = sum(c["area"] for c in comps)
        cen = [sum(c["centroid"][i] * c["area"] for c in comps) / tot for i in range(2)]
    else:
        cen = None
    dists = []
    for inc in truth.inclusions:
        if comps:
            dists.append(float(min(np.hypot(c["centroid"][0] - inc.center[0], c["centroid"][1] - inc.center[1]) for c in comps)))
        else:
            dists.append(None)
    return {
        "max_a": amax,
        "background_k2": kb,
        "contrast": contrast,
        "true_contrast": true_c if np.isfinite(true_c) else "inf",
        "relative_error": rel,
        "threshold": level,
        "centroid": cen,
        "components": comps,
        "n_components": len(comps),
        "center_distances": dists,
    }


def format_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
