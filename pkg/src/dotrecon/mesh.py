"""Triangulations of the computational domains and nodal fields on them.

Squares are structured ``n x n`` grids with every cell split into two
triangles.  Disks are built from concentric rings.  The square-minus-disk
annulus is cut from a square mesh whose edges follow the circle: disk rings
inside, the structured grid outside, and a Delaunay layer in between.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree

INTERIOR, OUTER, INNER = 0, 1, 2
TAG_NAMES = {"interior": INTERIOR, "outer-boundary": OUTER, "inner-boundary": INNER}
_FILL = 0.85  # node spacing / target_h for meshes with a circle inside
_GAP = 0.4  # grid nodes closer than this many cells to the circle are dropped
UNITS = ("intensity", "log-intensity", "coefficient", "dimensionless")


class MeshError(ValueError):
    """Degenerate domain description or invalid triangulation."""


class OutOfDomainError(ValueError):
    """A destination point lies outside the source mesh."""

    def __init__(self, node, point):
        super().__init__(f"node {node} at ({point[0]:.6g}, {point[1]:.6g}) lies outside the source mesh")
        self.node = node
        self.point = tuple(point)


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    radius: float | None = None
    half_width: float | None = None
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("disk", "square", "square-minus-disk"):
            raise MeshError(f"unknown domain kind {self.kind!r}")
        if self.kind in ("disk", "square-minus-disk") and not (self.radius and self.radius > 0):
            raise MeshError("disk radius must be positive")
        if self.kind in ("square", "square-minus-disk") and not (self.half_width and self.half_width > 0):
            raise MeshError("square half-width must be positive")
        if self.kind == "square-minus-disk" and self.radius >= self.half_width:
            raise MeshError("disk must lie strictly inside the square")

    @property
    def diameter(self) -> float:
        if self.kind == "disk":
            return 2.0 * self.radius
        return 2.0 * np.sqrt(2.0) * self.half_width


class Mesh:
    """Immutable triangle mesh.

    Attributes
    ----------
    nodes : (N, 2) float array, millimetres
    triangles : (M, 3) int array, counterclockwise
    tags : (N,) int array with values INTERIOR / OUTER / INNER
    h : nominal resolution (mm)
    """

    def __init__(self, nodes, triangles, tags, h):
        self.nodes = np.array(nodes, dtype=float)
        self.triangles = np.array(triangles, dtype=np.int64)
        self.tags = np.array(tags, dtype=np.int8)
        self.h = float(h)
        for a in (self.nodes, self.triangles, self.tags):
            a.setflags(write=False)
        self._cache = {}

    def __repr__(self):
        return f"Mesh(nodes={self.n_nodes}, triangles={self.n_triangles}, h={self.h:.4g})"

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            self._cache["areas"] = self.signed_areas()
        return self._cache["areas"]

    @property
    def gradients(self) -> np.ndarray:
        """(M, 3, 2) gradients of the barycentric coordinates."""
        if "grads" not in self._cache:
            p = self.nodes[self.triangles]
            area2 = 2.0 * self.areas
            g = np.empty((self.n_triangles, 3, 2))
            for i in range(3):
                j, k = (i + 1) % 3, (i + 2) % 3
                g[:, i, 0] = (p[:, j, 1] - p[:, k, 1]) / area2
                g[:, i, 1] = (p[:, k, 0] - p[:, j, 0]) / area2
            self._cache["grads"] = g
        return self._cache["grads"]

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def edges(self):
        """Unique edges as (E, 2) node pairs and the (M, 3) triangle-to-edge map.

        Local edge ``i`` of a triangle is the one opposite local vertex ``i``.
        """
        if "edges" not in self._cache:
            t = self.triangles
            local = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1).reshape(-1, 2)
            key = np.sort(local, axis=1)
            uniq, inverse = np.unique(key, axis=0, return_inverse=True)
            self._cache["edges"] = (uniq, inverse.reshape(-1, 3))
        return self._cache["edges"]

    def boundary_edges(self) -> np.ndarray:
        edges, t2e = self.edges()
        count = np.bincount(t2e.ravel(), minlength=len(edges))
        return edges[count == 1]

    def validate(self):
        if self.triangles.min() < 0 or self.triangles.max() >= self.n_nodes:
            raise MeshError("triangle node index out of range")
        if np.any(self.signed_areas() <= 0.0):
            raise MeshError("non-positive triangle area")
        edges, t2e = self.edges()
        count = np.bincount(t2e.ravel(), minlength=len(edges))
        if np.any(count > 2):
            raise MeshError("non-manifold edge")

    def submesh(self, keep_triangles, inner_tag_nodes=None):
        """Mesh made of a subset of triangles, nodes renumbered."""
        tri = self.triangles[keep_triangles]
        used = np.unique(tri)
        renum = -np.ones(self.n_nodes, dtype=np.int64)
        renum[used] = np.arange(len(used))
        tags = self.tags[used].copy()
        if inner_tag_nodes is not None:
            mark = np.zeros(self.n_nodes, dtype=bool)
            mark[inner_tag_nodes] = True
            tags[mark[used]] = INNER
        sub = Mesh(self.nodes[used], renum[tri], tags, self.h)
        sub._cache["parent_nodes"] = used
        return sub

    def locate(self, points, tol=1e-9):
        """Triangle index and barycentric coordinates for each point.

        Returns ``(tri, bary)``; ``tri`` is -1 for points outside the mesh.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if "tree" not in self._cache:
            self._cache["tree"] = cKDTree(self.centroids)
        tree = self._cache["tree"]
        k = min(12, self.n_triangles)
        _, cand = tree.query(points, k=k)
        cand = np.atleast_2d(cand)
        tri = -np.ones(len(points), dtype=np.int64)
        bary = np.zeros((len(points), 3))
        todo = np.arange(len(points))
        for col in range(k):
            if len(todo) == 0:
                break
            c = cand[todo, col]
            lam = self._bary(c, points[todo])
            ok = lam.min(axis=1) >= -tol / max(self.h, 1e-300)
            tri[todo[ok]] = c[ok]
            bary[todo[ok]] = lam[ok]
            todo = todo[~ok]
        for i in todo:  # fall back to a brute-force scan
            lam = self._bary(np.arange(self.n_triangles), np.repeat(points[i : i + 1], self.n_triangles, 0))
            j = int(np.argmax(lam.min(axis=1)))
            if lam[j].min() >= -tol / max(self.h, 1e-300):
                tri[i] = j
                bary[i] = lam[j]
        return tri, np.clip(bary, 0.0, None) / np.clip(bary, 0.0, None).sum(axis=1, keepdims=True).clip(1e-300)

    def _bary(self, tri, pts):
        p0 = self.nodes[self.triangles[tri, 0]]
        g = self.gradients[tri]
        d = pts - p0
        l1 = np.einsum("ij,ij->i", g[:, 1], d)
        l2 = np.einsum("ij,ij->i", g[:, 2], d)
        return np.stack([1.0 - l1 - l2, l1, l2], axis=1)


@dataclass
class ScalarField:
    """Nodal values of a piecewise-linear function on a mesh."""

    mesh: Mesh
    values: np.ndarray
    units: str = "dimensionless"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes,):
            raise ValueError(f"field has {self.values.shape} values for {self.mesh.n_nodes} nodes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")
        if self.units not in UNITS:
            raise ValueError(f"unknown units {self.units!r}")

    def gradient(self) -> np.ndarray:
        """(M, 2) per-triangle gradient."""
        return np.einsum("tij,ti->tj", self.mesh.gradients, self.values[self.mesh.triangles])

    def l2_norm(self) -> float:
        return float(np.sqrt(l2_inner(self.mesh, self.values, self.values)))


def l2_inner(mesh: Mesh, f, g) -> float:
    """Exact L2 inner product of two P1 functions."""
    ft = f[mesh.triangles]
    gt = g[mesh.triangles]
    local = (ft * gt).sum(1) + ft.sum(1) * gt.sum(1)
    return float((mesh.areas * local).sum() / 12.0)


# ---------------------------------------------------------------- builders


def build_mesh(domain: DomainSpec, target_h: float) -> Mesh:
    """Conforming triangulation of ``domain`` with edges no longer than ~1.5 target_h."""
    if not target_h > 0:
        raise MeshError("target_h must be positive")
    if 8.0 * target_h > domain.diameter:
        raise MeshError(f"target_h={target_h} too coarse for a domain of diameter {domain.diameter:.4g}")
    if domain.kind == "square":
        n = int(np.ceil(2.0 * domain.half_width / target_h - 1e-9))
        return square_grid(domain.half_width, n, domain.center)
    if domain.kind == "disk":
        return disk_rings(domain.radius, target_h, domain.center)
    full = conforming_square(domain.half_width, domain.radius, target_h, domain.center)
    return annulus_of(full)


def square_grid(half_width: float, n: int, center=(0.0, 0.0)) -> Mesh:
    """``(n+1)**2`` nodes, ``2 n**2`` triangles, outer boundary tagged."""
    if n < 1:
        raise MeshError("need at least one cell per side")
    t = np.linspace(-half_width, half_width, n + 1)
    X, Z = np.meshgrid(t, t, indexing="xy")
    nodes = np.column_stack([X.ravel() + center[0], Z.ravel() + center[1]])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)  # idx[row=z, col=x]
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    tris = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    tags = np.zeros(len(nodes), dtype=np.int8)
    edge = np.zeros((n + 1, n + 1), dtype=bool)
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
    tags[edge.ravel()] = OUTER
    m = Mesh(nodes, tris, tags, 2.0 * half_width / n)
    m._cache["grid"] = (n, half_width, tuple(center))
    return m


def disk_rings(radius: float, target_h: float, center=(0.0, 0.0)) -> Mesh:
    """Centre node plus rings ``r_j = j R / m`` carrying ``6 j`` nodes each."""
    m = max(1, int(np.ceil(radius / target_h - 1e-9)))
    pts = [np.zeros((1, 2))]
    starts = [0]
    count = 1
    for j in range(1, m + 1):
        theta = 2.0 * np.pi * np.arange(6 * j) / (6 * j)
        r = radius * j / m
        pts.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
        starts.append(count)
        count += 6 * j
    nodes = np.vstack(pts) + np.asarray(center)
    tris = []
    for j in range(1, m + 1):
        inner_n = 1 if j == 1 else 6 * (j - 1)
        outer_n = 6 * j
        i0, o0 = starts[j - 1], starts[j]
        if j == 1:
            for k in range(6):
                tris.append((0, o0 + k, o0 + (k + 1) % 6))
            continue
        # zip two rings together, always closing with the shorter diagonal
        a = b = 0
        while a < inner_n or b < outer_n:
            ia, ib = i0 + a % inner_n, i0 + (a + 1) % inner_n
            oa, ob = o0 + b % outer_n, o0 + (b + 1) % outer_n
            d_out = np.linalg.norm(nodes[ia] - nodes[ob])
            d_in = np.linalg.norm(nodes[oa] - nodes[ib])
            if b < outer_n and (a == inner_n or d_out < d_in - 1e-12 * radius):
                tris.append((ia, oa, ob))
                b += 1
            else:
                tris.append((ia, oa, ib))
                a += 1
    tris = np.asarray(tris, dtype=np.int64)
    tags = np.zeros(len(nodes), dtype=np.int8)
    tags[starts[m]:] = OUTER
    mesh = Mesh(nodes, tris, tags, radius / m)
    _orient(mesh)
    return mesh


def conforming_square(half_width: float, radius: float, target_h: float, center=(0.0, 0.0)) -> Mesh:
    """Square mesh whose edges follow the circle of ``radius`` around ``center``.

    Disk nodes come from :func:`disk_rings`; outside the circle the nodes of a
    structured grid are kept when they are at least ``0.4 h`` away from it, and
    the union is Delaunay-triangulated.  Both node sets use ``0.85 target_h``
    so that the gap layer stays under the 1.5 target_h edge bound.  Rim nodes
    carry the INNER tag; disk nodes come first, in :func:`disk_rings` order.
    """
    h = _FILL * target_h
    c = np.asarray(center, dtype=float)
    if not 0.0 < radius < half_width:
        raise MeshError("disk must lie strictly inside the square")
    disk = disk_rings(radius, h, center)
    n = int(np.ceil(2.0 * half_width / h - 1e-9))
    grid = square_grid(half_width, n, center)
    r = np.linalg.norm(grid.nodes - c, axis=1)
    keep = r > radius + _GAP * grid.h
    if not np.all(keep[grid.tags == OUTER]):
        raise MeshError("disk too close to the square boundary for this resolution")
    nodes = np.vstack([disk.nodes, grid.nodes[keep]])
    tags = np.concatenate([np.where(disk.tags == OUTER, INNER, INTERIOR), grid.tags[keep]]).astype(np.int8)
    tri = Delaunay(nodes, qhull_options="Qbb Qc Qz Q12").simplices
    mesh = Mesh(nodes, tri, tags, grid.h)
    _orient(mesh)
    rr = np.linalg.norm(mesh.nodes - c, axis=1)
    tol = 1e-9 * radius
    rt = rr[mesh.triangles]
    if np.any((rt < radius - tol).any(axis=1) & (rt > radius + tol).any(axis=1)):
        raise MeshError("triangulation crosses the circle; refine the grid")
    if np.any(mesh.signed_areas() <= 0.0):
        raise MeshError("degenerate triangle in the conforming mesh")
    mesh._cache["disk_triangles"] = (rt <= radius + tol).all(axis=1)
    mesh._cache["disk_nodes"] = disk.n_nodes
    return mesh


def annulus_of(full: Mesh) -> Mesh:
    """Square-minus-disk part of a mesh from :func:`conforming_square`."""
    inside = full._cache["disk_triangles"]
    return full.submesh(~inside)


def disk_of(full: Mesh) -> Mesh:
    """Disk part of a mesh from :func:`conforming_square`; its rim is tagged OUTER."""
    inside = full._cache["disk_triangles"]
    sub = full.submesh(inside)
    tags = np.where(sub.tags == INNER, OUTER, INTERIOR).astype(np.int8)
    out = Mesh(sub.nodes, sub.triangles, tags, sub.h)
    out._cache["parent_nodes"] = sub._cache["parent_nodes"]
    return out


def _orient(mesh: Mesh):
    bad = mesh.signed_areas() < 0
    if bad.any():
        t = mesh.triangles.copy()
        t[bad] = t[bad][:, [0, 2, 1]]
        mesh.triangles = np.ascontiguousarray(t)
        mesh.triangles.setflags(write=False)
        mesh._cache.clear()


# ---------------------------------------------------------------- queries


def boundary_nodes(mesh: Mesh, tag) -> np.ndarray:
    """Nodes carrying ``tag`` ordered counterclockwise along their boundary loop.

    On a full :func:`conforming_square` mesh the INNER nodes form an interior
    interface rather than a boundary; they are then ordered by polar angle.
    """
    code = TAG_NAMES.get(tag, tag) if isinstance(tag, str) else tag
    if code not in (OUTER, INNER) or not np.any(mesh.tags == code):
        raise MeshError(f"mesh has no boundary nodes tagged {tag!r}")
    key = ("loop", code)
    if key in mesh._cache:
        return mesh._cache[key]
    be = mesh.boundary_edges()
    be = be[(mesh.tags[be[:, 0]] == code) & (mesh.tags[be[:, 1]] == code)]
    if len(be) == 0:
        idx = np.flatnonzero(mesh.tags == code)
        ctr = mesh.nodes[idx].mean(axis=0)
        ang = np.mod(np.arctan2(mesh.nodes[idx, 1] - ctr[1], mesh.nodes[idx, 0] - ctr[0]), 2 * np.pi)
        loop = idx[np.argsort(ang, kind="stable")]
        loop.setflags(write=False)
        mesh._cache[key] = loop
        return loop
    nbr: dict[int, list[int]] = {}
    for a, b in be:
        nbr.setdefault(int(a), []).append(int(b))
        nbr.setdefault(int(b), []).append(int(a))
    if any(len(v) != 2 for v in nbr.values()):
        raise MeshError("boundary is not a simple closed loop")
    start = min(nbr)
    loop = [start, nbr[start][0]]
    while True:
        a, b = nbr[loop[-1]]
        nxt = a if a != loop[-2] else b
        if nxt == start:
            break
        loop.append(nxt)
    if len(loop) != len(nbr):
        raise MeshError("boundary consists of more than one loop")
    loop = np.asarray(loop, dtype=np.int64)
    p = mesh.nodes[loop]
    area = 0.5 * np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1])
    if area < 0:
        loop = loop[::-1]
    # start at the node of smallest polar angle in [0, 2 pi) for reproducibility
    ctr = mesh.nodes.mean(axis=0) if code == OUTER else p.mean(axis=0)
    ang = np.mod(np.arctan2(mesh.nodes[loop, 1] - ctr[1], mesh.nodes[loop, 0] - ctr[0]), 2 * np.pi)
    loop = np.roll(loop, -int(np.argmin(ang)))
    loop.setflags(write=False)
    mesh._cache[key] = loop
    return loop


def transfer_field(src: ScalarField, dst_mesh: Mesh, log: bool = False, tol: float = 1e-9) -> ScalarField:
    """Piecewise-linear interpolation of ``src`` onto the nodes of ``dst_mesh``.

    With ``log=True`` the logarithm of a positive field is interpolated and
    exponentiated; this keeps exponentially varying intensities accurate.
    """
    vals = src.values
    if log:
        if np.any(vals <= 0):
            raise ValueError("log interpolation needs a positive field")
        vals = np.log(vals)
    tri, bary = src.mesh.locate(dst_mesh.nodes, tol=tol)
    if np.any(tri < 0):
        i = int(np.flatnonzero(tri < 0)[0])
        raise OutOfDomainError(i, dst_mesh.nodes[i])
    out = np.einsum("ij,ij->i", bary, vals[src.mesh.triangles[tri]])
    # exact copies at coincident nodes
    tree = cKDTree(src.mesh.nodes)
    d, j = tree.query(dst_mesh.nodes)
    same = d <= tol
    out[same] = vals[j[same]]
    if log:
        out = np.exp(out)
    return ScalarField(dst_mesh, out, src.units)


def interpolate_at(src: ScalarField, points, log: bool = False) -> np.ndarray:
    """Evaluate a field at arbitrary points inside its mesh."""
    vals = np.log(src.values) if log else src.values
    tri, bary = src.mesh.locate(points)
    if np.any(tri < 0):
        i = int(np.flatnonzero(tri < 0)[0])
        raise OutOfDomainError(i, np.atleast_2d(points)[i])
    out = np.einsum("ij,ij->i", bary, vals[src.mesh.triangles[tri]])
    return np.exp(out) if log else out


# ---------------------------------------------------------------- export


def write_field_csv(field_: ScalarField, path) -> None:
    data = np.column_stack([field_.mesh.nodes, field_.values])
    np.savetxt(path, data, delimiter=",", header="x,z,value", comments="", fmt="%.17g")


def read_field_csv(path):
    """Returns ``(points, values)``; raises ValueError naming the bad row."""
    pts, vals = [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "x,z,value":
            raise ValueError(f"{path}: expected header 'x,z,value', got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            try:
                if len(parts) != 3:
                    raise ValueError
                x, z, v = (float(p) for p in parts)
            except ValueError:
                raise ValueError(f"{path}: malformed row at line {lineno}: {line.strip()!r}") from None
            pts.append((x, z))
            vals.append(v)
    return np.asarray(pts).reshape(-1, 2), np.asarray(vals)


def write_pgm(field_: ScalarField, path, resolution: int = 128, vmin=None, vmax=None) -> dict:
    """Rasterise a field to an 8-bit PGM; the min/max mapping goes to ``path + '.txt'``.

    Pixels outside the mesh are written as 0.
    """
    path = Path(path)
    lo, hi = field_.mesh.nodes.min(0), field_.mesh.nodes.max(0)
    xs = np.linspace(lo[0], hi[0], resolution)
    zs = np.linspace(hi[1], lo[1], resolution)  # first row is the top of the image
    X, Z = np.meshgrid(xs, zs)
    pts = np.column_stack([X.ravel(), Z.ravel()])
    tri, bary = field_.mesh.locate(pts, tol=1e-9)
    vals = np.full(len(pts), np.nan)
    ok = tri >= 0
    vals[ok] = np.einsum("ij,ij->i", bary[ok], field_.values[field_.mesh.triangles[tri[ok]]])
    vmin = float(np.nanmin(vals)) if vmin is None else float(vmin)
    vmax = float(np.nanmax(vals)) if vmax is None else float(vmax)
    span = vmax - vmin if vmax > vmin else 1.0
    grey = np.where(ok, np.clip(np.round(1 + 254 * (vals - vmin) / span), 1, 255), 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{resolution} {resolution}\n255\n".encode())
        fh.write(grey.tobytes())
    info = {"min": vmin, "max": vmax, "mapping": "grey = 1 + 254 (value - min) / (max - min); 0 = outside mesh",
            "x_range": (float(lo[0]), float(hi[0])), "z_range": (float(lo[1]), float(hi[1]))}
    with open(str(path) + ".txt", "w") as fh:
        for k, v in info.items():
            fh.write(f"{k} = {v}\n")
    return info
