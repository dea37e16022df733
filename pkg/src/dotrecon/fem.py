"""P1 finite elements for  Δv − c v − b·∇v = f  and the coefficient-recovery kernel.

The reaction term is mass-lumped by default (``c_i ∫φ_i`` on the diagonal),
which keeps the assembled operator an M-matrix on meshes whose opposite
angles sum to at most π.  That is what gives a discrete maximum principle,
and with it positive intensities, even where ``c h²`` is large.  The
coefficient recovery uses the same lumped form, so recovering ``a`` from a
field computed with ``a`` returns ``a`` at every interior node.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, ScalarField

MAX_TOL = 1e-4


class NonConvergenceError(RuntimeError):
    def __init__(self, message, residual=float("nan"), history=None):
        super().__init__(message)
        self.residual = residual
        self.history = history or []


class PositivityError(ValueError):
    """A field that must be positive is not."""


class SingularSystemError(ValueError):
    pass


def _nodal(x, mesh: Mesh, name: str) -> np.ndarray:
    if isinstance(x, ScalarField):
        if x.mesh is not mesh and x.mesh.n_nodes != mesh.n_nodes:
            raise ValueError(f"{name} lives on a different mesh")
        x = x.values
    if np.isscalar(x):
        x = np.full(mesh.n_nodes, float(x))
    x = np.asarray(x, dtype=float)
    if x.shape != (mesh.n_nodes,):
        raise ValueError(f"{name} must have one value per node")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} has non-finite values")
    return x


@dataclass
class EllipticProblem:
    """Δv − c v − b·∇v = f on ``mesh`` with Dirichlet data on the boundary.

    ``c`` and ``f`` are nodal (scalar, array or ScalarField); ``b`` is an
    (M, 2) per-triangle array or None.  ``kappa`` optionally replaces Δv by
    ∇·(κ∇v) with κ > 0 constant on each triangle.  ``load`` adds a precomputed vector
    ``∫ f η`` on top of ``f``.  ``dirichlet`` is ``(nodes, values)`` or a dict.
    """

    mesh: Mesh
    c: object = 0.0
    b: object = None
    f: object = 0.0
    dirichlet: object = None
    load: object = None
    lumped: bool = True
    kappa: object = None

    def __post_init__(self):
        m = self.mesh
        if self.kappa is not None:
            self.kappa = np.asarray(self.kappa, dtype=float)
            if self.kappa.shape != (m.n_triangles,) or not np.all(self.kappa > 0) or not np.all(np.isfinite(self.kappa)):
                raise ValueError("kappa must be a positive finite per-triangle array")
        self.c = _nodal(self.c, m, "c")
        self.f = _nodal(self.f, m, "f")
        if self.b is not None:
            self.b = np.asarray(self.b, dtype=float)
            if self.b.shape != (m.n_triangles, 2):
                raise ValueError("b must be an (n_triangles, 2) array")
            if not np.all(np.isfinite(self.b)):
                raise ValueError("b has non-finite values")
            if not np.any(self.b):
                self.b = None
        if self.load is not None:
            self.load = np.asarray(self.load, dtype=float)
            if self.load.shape != (m.n_nodes,) or not np.all(np.isfinite(self.load)):
                raise ValueError("load must be a finite nodal vector")
        nodes, values = _dirichlet_arrays(self.dirichlet, m)
        bnd = np.unique(m.boundary_edges())
        missing = np.setdiff1d(bnd, nodes)
        if len(missing):
            raise ValueError(f"Dirichlet data missing on {len(missing)} boundary nodes (first: {missing[0]})")
        self.dirichlet = (nodes, values)


def _dirichlet_arrays(d, mesh):
    if d is None:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    if isinstance(d, dict):
        nodes = np.fromiter(d.keys(), dtype=np.int64, count=len(d))
        values = np.fromiter(d.values(), dtype=float, count=len(d))
    else:
        nodes, values = d
        nodes = np.asarray(nodes, dtype=np.int64)
        values = np.broadcast_to(np.asarray(values, dtype=float), nodes.shape).copy()
    if len(nodes) and (nodes.min() < 0 or nodes.max() >= mesh.n_nodes):
        raise ValueError("Dirichlet node index out of range")
    if not np.all(np.isfinite(values)):
        raise ValueError("Dirichlet values must be finite")
    order = np.argsort(nodes, kind="stable")
    nodes, values = nodes[order], values[order]
    if len(np.unique(nodes)) != len(nodes):
        raise ValueError("duplicate Dirichlet nodes")
    return nodes, values


@dataclass
class SparseSystem:
    """Reduced system on the unconstrained nodes.

    ``solve`` expands the reduced solution back to a full nodal vector.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    symmetric: bool
    free: np.ndarray
    fixed: np.ndarray
    fixed_values: np.ndarray
    n_nodes: int
    info: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def expand(self, x_free) -> np.ndarray:
        out = np.empty(self.n_nodes)
        out[self.free] = x_free
        out[self.fixed] = self.fixed_values
        return out


# ---------------------------------------------------------------- local matrices


def stiffness(mesh: Mesh, kappa=None) -> sp.csr_matrix:
    g = mesh.gradients
    w = mesh.areas if kappa is None else mesh.areas * kappa
    local = w[:, None, None] * np.einsum("tid,tjd->tij", g, g)
    return _scatter(mesh, local)


def mass(mesh: Mesh, c=None, lumped=False) -> sp.csr_matrix:
    """Exact P1 matrix of ``∫ c φ_i φ_j`` (c nodal, default 1).

    With ``lumped`` the matrix is ``diag(c_i ∫φ_i)``.
    """
    t = mesh.triangles
    area = mesh.areas
    if lumped:
        d = lumped_mass(mesh)
        return sp.diags(d if c is None else np.asarray(c, dtype=float) * d).tocsr()
    if c is None:
        base = (np.ones((3, 3)) + np.eye(3)) / 12.0
        local = area[:, None, None] * base
    else:
        ct = np.asarray(c, dtype=float)[t]
        s = ct.sum(axis=1)
        # ∫ c λi λj = |T|/60 (s + ci + cj) for i≠j, |T|/30 (s + 2 ci) for i=j
        local = (s[:, None, None] + ct[:, :, None] + ct[:, None, :]) / 60.0
        idx = np.arange(3)
        local[:, idx, idx] = (s[:, None] + 2.0 * ct) / 30.0
        local *= area[:, None, None]
    return _scatter(mesh, local)


def lumped_mass(mesh: Mesh) -> np.ndarray:
    """``∫ φ_i``, one third of the area of each adjacent triangle."""
    if "lumped" not in mesh._cache:
        d = np.zeros(mesh.n_nodes)
        np.add.at(d, mesh.triangles, np.repeat(mesh.areas[:, None] / 3.0, 3, axis=1))
        mesh._cache["lumped"] = d
    return mesh._cache["lumped"]


def convection(mesh: Mesh, b) -> sp.csr_matrix:
    """``∫ (b·∇φ_j) φ_i`` with b constant per triangle (centroid rule)."""
    bg = np.einsum("td,tjd->tj", b, mesh.gradients)
    local = (mesh.areas / 3.0)[:, None, None] * np.broadcast_to(bg[:, None, :], (mesh.n_triangles, 3, 3))
    return _scatter(mesh, local)


def load_vector(mesh: Mesh, f) -> np.ndarray:
    """``∫ f φ_i`` for nodal P1 ``f`` (exact)."""
    return mass(mesh) @ np.asarray(f, dtype=float)


def _scatter(mesh, local):
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


# ---------------------------------------------------------------- assemble / solve


def assemble(problem: EllipticProblem) -> SparseSystem:
    """Galerkin system  (K + M_c + C) v = −∫ f η  with Dirichlet rows substituted out.

    With ``lumped`` both zero-order terms (``c v`` and ``f``) use the nodal
    quadrature ``∫ g φ_i ≈ g_i ∫ φ_i``.
    """
    m = problem.mesh
    A = stiffness(m, problem.kappa)
    if np.any(problem.c):
        A = A + mass(m, problem.c, lumped=problem.lumped)
    symmetric = problem.b is None
    if not symmetric:
        A = A + convection(m, problem.b)
    rhs = -(lumped_mass(m) * problem.f if problem.lumped else load_vector(m, problem.f))
    if problem.load is not None:
        rhs = rhs - problem.load
    fixed, values = problem.dirichlet
    is_free = np.ones(m.n_nodes, dtype=bool)
    is_free[fixed] = False
    free = np.flatnonzero(is_free)
    A = A.tocsr()
    Aff = A[free][:, free].tocsr()
    r = rhs[free] - A[free][:, fixed] @ values
    Aff.sum_duplicates()
    Aff.sort_indices()
    return SparseSystem(Aff, r, symmetric, free, fixed, values, m.n_nodes)


def solve(system: SparseSystem, tol: float = 1e-12, method: str = "iterative", x0=None) -> np.ndarray:
    """Solve the reduced system and return the full nodal vector.

    The iterative path runs Jacobi-preconditioned CG (BiCGStab when the
    system is not symmetric) inside an iterative-refinement loop and stops
    when the componentwise backward error ``max |r_i| / (|A||x| + |b|)_i`` is
    at most ``tol``.  That bound implies the usual normwise one, and it keeps
    nodes where the solution is ten decades below its maximum accurate, which
    a plain relative-residual test does not.  ``method="direct"`` uses a
    sparse LU factorisation instead.
    """
    if not 0.0 < tol <= MAX_TOL:
        raise ValueError(f"tol must lie in (0, {MAX_TOL}]")
    n = system.dimension
    if n == 0:
        return system.expand(np.zeros(0))
    A, b = system.matrix, system.rhs
    if not np.any(b):
        return system.expand(np.zeros(n))
    absA = abs(A)
    bnorm = np.linalg.norm(b)

    def backward_error(x):
        r = b - A @ x
        denom = absA @ np.abs(x) + np.abs(b)
        with np.errstate(invalid="ignore", divide="ignore"):
            w = np.where(denom > 0, np.abs(r) / denom, np.where(r == 0, 0.0, np.inf))
        return r, float(w.max())

    if method == "direct":
        try:
            x = spla.splu(A.tocsc()).solve(b)
        except RuntimeError as exc:
            raise SingularSystemError(str(exc)) from exc
        r, omega = backward_error(x)
        res = float(np.linalg.norm(r) / bnorm)
        system.info.update(residual=res, backward_error=omega, method="splu", sweeps=0)
        if not np.all(np.isfinite(x)) or omega > tol:
            raise NonConvergenceError(f"sparse LU left backward error {omega:.3e}", res)
        return system.expand(x)
    if method != "iterative":
        raise ValueError("method must be 'iterative' or 'direct'")
    diag = A.diagonal()
    if np.any(diag == 0.0):
        raise SingularSystemError("zero on the diagonal")
    M = sp.diags(1.0 / diag)
    krylov = spla.cg if system.symmetric else spla.bicgstab
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)[system.free].copy()
    budget = 10 * n
    history = []
    for sweep in range(20):
        r, omega = backward_error(x)
        history.append(omega)
        if omega <= tol:
            break
        count = [0]

        def tick(_):
            count[0] += 1

        d, info = krylov(A, r, rtol=min(1e-10, tol), atol=0.0, maxiter=budget, M=M, callback=tick)
        budget -= count[0]
        if info < 0 or not np.all(np.isfinite(d)):
            raise NonConvergenceError(f"{krylov.__name__} broke down (info={info})",
                                      float(np.linalg.norm(r) / bnorm), history)
        x = x + d
        if budget <= 0:
            r, omega = backward_error(x)
            history.append(omega)
            break
    res = float(np.linalg.norm(r) / bnorm)
    system.info.update(residual=res, backward_error=omega, method=krylov.__name__, sweeps=len(history) - 1)
    if omega > tol:
        raise NonConvergenceError(f"{krylov.__name__} stopped with backward error {omega:.3e} "
                                  f"(relative residual {res:.3e})", res, history)
    return system.expand(x)


# ---------------------------------------------------------------- coefficient recovery


def _int_mono(p):
    """∫ λ1^a λ2^b λ3^c over a triangle, divided by its area."""
    return 2.0 * np.prod([factorial(int(k)) for k in p]) / factorial(int(sum(p)) + 2)


def _p2_tensor():
    """Q[j, k, p] = ∫ λj λk ψp / |T| for the six local P2 functions ψp.

    p = 0..2: vertex functions λp(2λp − 1); p = 3..5: edge functions 4 λq λr on
    the edge opposite vertex p − 3.
    """
    Q = np.zeros((3, 3, 6))
    e = np.eye(3, dtype=int)
    for j in range(3):
        for k in range(3):
            base = e[j] + e[k]
            for p in range(3):
                Q[j, k, p] = 2.0 * _int_mono(base + 2 * e[p]) - _int_mono(base + e[p])
                q, r = (p + 1) % 3, (p + 2) % 3
                Q[j, k, 3 + p] = 4.0 * _int_mono(base + e[q] + e[r])
    return Q


_Q2 = _p2_tensor()


def _interior_mask(mesh):
    bnd = np.zeros(mesh.n_nodes, dtype=bool)
    bnd[mesh.boundary_edges().ravel()] = True
    return bnd


def weak_form_rows(u: np.ndarray, mesh: Mesh, test: str = "p1", lumped: bool = True):
    """Rows of  ∫ a u η = −∫ ∇u·∇η  for nodal ``a``, one per interior test function.

    ``test="p1"`` uses hat functions with the reaction term integrated as in
    :func:`assemble` (lumped or exact); ``test="p2"`` uses the quadratic
    Lagrange functions at interior vertices and edges with exact integration.
    Returns ``(B, g, size)`` where ``size`` is a positive scale for each row:
    ``u`` at the test node times the support area.
    """
    t = mesh.triangles
    area = mesh.areas
    grads = mesh.gradients
    N = mesh.n_nodes
    interior = ~_interior_mask(mesh)
    if test == "p1":
        g = -(stiffness(mesh) @ u)
        if lumped:
            m = lumped_mass(mesh)
            B = sp.diags(m * u).tocsr()
        else:
            B = mass(mesh, u)
        keep = np.flatnonzero(interior)
        return B[keep], g[keep], (3.0 * lumped_mass(mesh) * u)[keep]
    if test != "p2":
        raise ValueError("test must be 'p1' or 'p2'")
    ut = u[t]
    gu = np.einsum("ti,tid->td", ut, grads)
    edges, t2e = mesh.edges()
    local = area[:, None, None] * np.einsum("tk,jkp->tpj", ut, _Q2)
    gv = area[:, None] / 3.0 * np.einsum("td,tpd->tp", gu, grads)
    ge = -4.0 * area[:, None] / 3.0 * np.einsum("td,tpd->tp", gu, grads)
    gl = -np.concatenate([gv, ge], axis=1)
    dof = np.concatenate([t, N + t2e], axis=1)
    ndof = N + len(edges)
    inner_edge = np.bincount(t2e.ravel(), minlength=len(edges)) == 2
    keep = np.flatnonzero(np.concatenate([interior, inner_edge]))
    pos_u = np.concatenate([u, 0.5 * (u[edges[:, 0]] + u[edges[:, 1]])])
    rows = np.repeat(dof, 3, axis=1).ravel()
    cols = np.tile(t, (1, 6)).ravel()
    B = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(ndof, N)).tocsr()
    g = np.bincount(dof.ravel(), weights=gl.ravel(), minlength=ndof)
    supp = np.bincount(dof.ravel(), weights=np.repeat(area, 6), minlength=ndof)
    return B[keep], g[keep], pos_u[keep] * supp[keep]


def recover_coefficient(u, k2: float, mesh: Mesh = None, test: str = "p1", lumped: bool = True,
                        reg: float = 1e-8, clamp: bool = True) -> ScalarField:
    """Nodal ``a`` with  ∫ a u η = −∫ ∇u·∇η  for all interior test functions, then ``max(a, k2)``.

    Rows are divided by their size before the least-squares solve; ``reg`` is
    a Tikhonov weight, relative to the largest normal-matrix diagonal, on the
    discrete gradient of ``a`` plus a small pull towards ``k2``.  No test
    function sees the boundary nodes, so their values are replaced by
    :func:`extend_to_boundary` of the (clamped) interior values.  With P1
    tests and lumping on, a field computed by :func:`assemble`/:func:`solve`
    with coefficient ``a`` gives back ``a`` at the interior nodes.
    """
    if isinstance(u, ScalarField):
        mesh = u.mesh
        u = u.values
    u = np.asarray(u, dtype=float)
    if mesh is None:
        raise ValueError("mesh required for a raw nodal vector")
    if u.shape != (mesh.n_nodes,):
        raise ValueError("u must have one value per node")
    bad = np.flatnonzero(~(u > 0))
    if len(bad):
        x, z = mesh.nodes[bad[0]]
        raise PositivityError(f"u <= 0 at {len(bad)} nodes, first at ({x:.4g}, {z:.4g})")
    B, g, size = weak_form_rows(u, mesh, test, lumped)
    W = sp.diags(1.0 / size)
    Bw = (W @ B).tocsr()
    gw = g / size
    normal = (Bw.T @ Bw).tocsc()
    top = float(normal.diagonal().max())
    if not top > 0:
        raise SingularSystemError("empty recovery system")
    K = stiffness(mesh)
    R = K / float(K.diagonal().max()) + 1e-3 * sp.identity(mesh.n_nodes)
    lam = reg * top
    rhs = Bw.T @ gw + lam * 1e-3 * k2
    a = spla.spsolve((normal + lam * R).tocsc(), rhs)
    if not np.all(np.isfinite(a)):
        raise SingularSystemError("normal equations are singular")
    if clamp:
        a = np.maximum(a, k2)
    a = extend_to_boundary(mesh, a)
    if clamp:  # the extension can round a hair below k2
        a = np.maximum(a, k2)
    return ScalarField(mesh, a, "coefficient", {"k2": k2, "test": test})


def extend_to_boundary(mesh: Mesh, values) -> np.ndarray:
    """Replace boundary values by the discrete harmonic extension of the interior ones.

    Boundary node ``b`` satisfies ``Σ_j K_bj v_j = 0`` (zero discrete normal
    flux).  Each boundary value is a convex combination of interior values,
    so lower and upper bounds carry over.
    """
    v = np.array(values, dtype=float)
    bnd = _interior_mask(mesh)
    if not bnd.any():
        return v
    K = stiffness(mesh).tocsr()
    b = np.flatnonzero(bnd)
    i = np.flatnonzero(~bnd)
    if len(i) == 0:
        return v
    Kbb = K[b][:, b].tocsc()
    v[b] = spla.spsolve(Kbb, -(K[b][:, i] @ v[i]))
    return v
