"""Point-source forward solves on Ω₀ and synthetic boundary measurements.

The solution of  Δu − a u = −A δ(x − x₀),  u = 0 on ∂Ω₀, is split as
u = A u₀ + û with u₀ the free-space fundamental solution.  The remainder
solves  Δû − a û = (a − k²) A u₀  with  û = −A u₀  on ∂Ω₀; its right-hand
side vanishes wherever a = k², in particular near the source.

Intensities fall by many decades across Ω₀, and behind an absorbing
inclusion û nearly cancels A u₀.  The remainder is therefore computed through
the ratio  w = û / (A u₀),  which satisfies the equivalent symmetric problem

    ∇·(u₀² ∇w) − (a − k²) u₀² w = (a − k²) u₀²,   w = −1 on ∂Ω₀,

with w = 0 at the vertices of the triangle holding the source (there
|û| / u₀ is below 1e-4 for any source at least 3 mm from ∂Ω₀).  The ratio is
of order one everywhere, so u = A u₀ (1 + w) keeps its relative accuracy in
the shadow of an inclusion, and the discrete maximum principle gives u ≥ 0.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fem
from .mesh import INNER, Mesh, ScalarField, boundary_nodes, conforming_square
from .scenes import OMEGA0_HALF_WIDTH, OMEGA_RADIUS
from .specfun import SourcePoint, bessel_k0

log = logging.getLogger(__name__)


class ModelError(RuntimeError):
    """The computed intensity violates positivity."""


class FormatError(ValueError):
    pass


def omega0_mesh(h: float = 0.6, half_width: float = OMEGA0_HALF_WIDTH, radius: float = OMEGA_RADIUS) -> Mesh:
    """Ω₀ mesh with nodes on the circle ∂Ω (tagged INNER)."""
    return conforming_square(half_width, radius, h)


def free_space(mesh: Mesh, src: SourcePoint, k2: float) -> np.ndarray:
    """A·K₀(k r)/(2π) at the nodes; a node on the source gets the value at r = h/100."""
    k = np.sqrt(k2)
    r = np.linalg.norm(mesh.nodes - src.xy, axis=1)
    r = np.maximum(r, 1e-2 * mesh.h)
    return src.amplitude * bessel_k0(k * r) / (2.0 * np.pi)


def solve_point_source(a, src: SourcePoint, k2: float, omega_radius: float = OMEGA_RADIUS,
                       tol: float = 1e-12, method: str = "iterative") -> ScalarField:
    """Intensity u on the mesh of ``a``; u > 0 is checked on the closed disk Ω̄."""
    mesh = a.mesh
    av = a.values
    if np.any(av < k2 * (1 - 1e-12)):
        raise ValueError("a must be >= k2 everywhere")
    d_src = np.hypot(*src.xy)
    if d_src <= omega_radius:
        raise ValueError(f"source {src.id} at distance {d_src:.4g} lies inside the disk")
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    if not np.all((src.xy > lo) & (src.xy < hi)):
        raise ValueError(f"source {src.id} at {src.position} is not inside the mesh")
    u0 = free_space(mesh, src, k2)
    ref = u0.max()
    rel = u0 / ref
    k = np.sqrt(k2)
    rc = np.maximum(np.linalg.norm(mesh.centroids - src.xy, axis=1), 1e-2 * mesh.h)
    kappa = (bessel_k0(k * rc) / (2.0 * np.pi) * src.amplitude / ref) ** 2
    c = (av - k2) * rel ** 2
    bnd = np.unique(mesh.boundary_edges())
    tri, _ = mesh.locate(src.xy[None, :])
    hold = np.setdiff1d(mesh.triangles[tri[0]], bnd) if tri[0] >= 0 else np.zeros(0, dtype=np.int64)
    fixed = np.concatenate([bnd, hold])
    values = np.concatenate([-np.ones(len(bnd)), np.zeros(len(hold))])
    prob = fem.EllipticProblem(mesh, c=c, kappa=kappa, load=fem.lumped_mass(mesh) * c, dirichlet=(fixed, values))
    w = fem.solve(fem.assemble(prob), tol=tol, method=method)
    u = u0 * (1.0 + w)
    inside = np.hypot(mesh.nodes[:, 0], mesh.nodes[:, 1]) <= omega_radius * (1 + 1e-9)
    bad = np.flatnonzero(inside & ~(u > 0))
    if len(bad):
        x, z = mesh.nodes[bad[0]]
        raise ModelError(f"u <= 0 at {len(bad)} nodes of the closed disk, first at ({x:.4g}, {z:.4g})")
    return ScalarField(mesh, u, "intensity", {"source": src.id, "k2": k2})


# ---------------------------------------------------------------- measurements


@dataclass
class MeasurementSet:
    """Boundary traces per source, ordered by source id and then along the loop."""

    sources: list
    positions: dict
    intensities: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sources = sorted(self.sources, key=lambda p: p.id)
        for p in self.sources:
            pos = np.asarray(self.positions[p.id], dtype=float)
            val = np.asarray(self.intensities[p.id], dtype=float)
            if pos.ndim != 2 or pos.shape[1] != 2 or len(pos) != len(val):
                raise FormatError(f"trace of source {p.id} is malformed")
            if not np.all(val > 0) or not np.all(np.isfinite(val)):
                raise FormatError(f"trace of source {p.id} has non-positive or non-finite intensities")
            self.positions[p.id] = pos
            self.intensities[p.id] = val

    @property
    def ids(self) -> list:
        return [p.id for p in self.sources]

    def source(self, i: int) -> SourcePoint:
        for p in self.sources:
            if p.id == i:
                return p
        raise KeyError(f"no trace for source {i}")

    def trace(self, i: int):
        return self.positions[i], self.intensities[i]

    def scaled(self, c: float) -> "MeasurementSet":
        return MeasurementSet(list(self.sources), dict(self.positions),
                              {i: c * v for i, v in self.intensities.items()}, dict(self.meta))

    def subset(self, ids) -> "MeasurementSet":
        keep = [p for p in self.sources if p.id in set(ids)]
        return MeasurementSet(keep, {p.id: self.positions[p.id] for p in keep},
                              {p.id: self.intensities[p.id] for p in keep}, dict(self.meta))

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source_id", "s", "x", "z", "intensity"])
            for p in self.sources:
                for (x, z), v in zip(self.positions[p.id], self.intensities[p.id]):
                    w.writerow([p.id, repr(p.s), repr(float(x)), repr(float(z)), repr(float(v))])
        meta = dict(self.meta)
        for p in self.sources:
            meta[f"source{p.id}"] = f"{p.position[0]!r},{p.position[1]!r},{p.amplitude!r}"
        with open(meta_path(path), "w") as fh:
            for key in sorted(meta):
                fh.write(f"{key}={meta[key]}\n")

    @classmethod
    def read(cls, path) -> "MeasurementSet":
        path = Path(path)
        meta = {}
        mp = meta_path(path)
        if mp.exists():
            for n, line in enumerate(mp.read_text().splitlines(), 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise FormatError(f"{mp}:{n}: expected key=value")
                key, val = line.split("=", 1)
                meta[key.strip()] = val.strip()
        rows: dict = {}
        dist: dict = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["source_id", "s", "x", "z", "intensity"]:
                raise FormatError(f"{path}:1: expected header source_id,s,x,z,intensity")
            for n, row in enumerate(reader, 2):
                if not row:
                    continue
                if len(row) != 5:
                    raise FormatError(f"{path}:{n}: expected 5 columns, got {len(row)}")
                try:
                    sid = int(row[0])
                    s, x, z, v = (float(c) for c in row[1:])
                except ValueError as exc:
                    raise FormatError(f"{path}:{n}: {exc}") from None
                if not (np.isfinite(v) and v > 0):
                    raise FormatError(f"{path}:{n}: intensity must be positive")
                rows.setdefault(sid, []).append((x, z, v))
                dist[sid] = s
        sources = []
        for sid in sorted(rows):
            if f"source{sid}" in meta:
                x, z, amp = (float(c) for c in meta.pop(f"source{sid}").split(","))
                sources.append(SourcePoint((x, z), amp, sid))
            else:
                sources.append(SourcePoint((dist[sid], 0.0), 1.0, sid))
        pos = {sid: np.array([r[:2] for r in rows[sid]]) for sid in rows}
        val = {sid: np.array([r[2] for r in rows[sid]]) for sid in rows}
        return cls(sources, pos, val, meta)


def meta_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def synthesize_measurements(a: ScalarField, sources, k2: float, noise: float = 0.02, seed: int = 0,
                            omega_radius: float = OMEGA_RADIUS, method: str = "iterative") -> MeasurementSet:
    """Traces on the ∂Ω nodes of ``a.mesh`` with multiplicative Gaussian noise.

    Noisy samples that come out non-positive are replaced by half the smallest
    positive sample of that trace; the count is stored as ``clipped``.
    """
    if not noise >= 0:
        raise ValueError("noise must be >= 0")
    mesh = a.mesh
    rim = boundary_nodes(mesh, INNER)
    rng = np.random.default_rng(seed)
    sources = sorted(sources, key=lambda p: p.id)
    pos, val = {}, {}
    clipped = 0
    for src in sources:
        u = solve_point_source(a, src, k2, omega_radius, method=method).values[rim]
        if noise > 0:
            u = u * (1.0 + noise * rng.standard_normal(len(u)))
            bad = ~(u > 0)
            if bad.any():
                clipped += int(bad.sum())
                u[bad] = 0.5 * u[~bad].min()
                log.warning("source %d: clipped %d non-positive noisy samples", src.id, bad.sum())
        pos[src.id] = mesh.nodes[rim].copy()
        val[src.id] = u
    meta = {"k2": repr(float(k2)), "noise": repr(float(noise)), "seed": str(seed),
            "surface": "omega", "smoothed": "false", "clipped": str(clipped)}
    return MeasurementSet(sources, pos, val, meta)
