"""Phantom scenes and the default source layout.

Geometry (mm): the imaged disk Ω has radius 4.63, the square Ω₁ around it
has half-width 5.83 and the outer square Ω₀ has half-width 23.32.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import DomainSpec, Mesh, ScalarField
from .specfun import SourcePoint

K2_BACKGROUND = 2.403  # 1/mm²
OMEGA_RADIUS = 4.63
OMEGA1_HALF_WIDTH = 5.83
OMEGA0_HALF_WIDTH = 23.32
INF = float("inf")
INF_SURROGATE = 20.0  # an "infinite" contrast is rendered as 20 k²

OMEGA = DomainSpec("disk", radius=OMEGA_RADIUS)
OMEGA1 = DomainSpec("square", half_width=OMEGA1_HALF_WIDTH)
OMEGA0 = DomainSpec("square", half_width=OMEGA0_HALF_WIDTH)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Inclusion:
    center: tuple
    radius: float
    contrast: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.radius > 0:
            raise SceneError("inclusion radius must be positive")
        if not (self.contrast >= 1.0):
            raise SceneError(f"contrast must be >= 1 or inf, got {self.contrast}")

    @property
    def factor(self) -> float:
        return INF_SURROGATE if np.isinf(self.contrast) else float(self.contrast)


@dataclass
class PhantomScene:
    background_k2: float = K2_BACKGROUND
    inclusions: list = field(default_factory=list)
    domain: DomainSpec = OMEGA0

    def __post_init__(self):
        if not self.background_k2 > 0:
            raise SceneError("background_k2 must be positive")
        self.inclusions = [i if isinstance(i, Inclusion) else Inclusion(*i) for i in self.inclusions]
        for inc in self.inclusions:
            if np.hypot(*inc.center) + inc.radius > OMEGA_RADIUS + 1e-12:
                raise SceneError(f"inclusion at {inc.center} with radius {inc.radius} leaves the disk of radius {OMEGA_RADIUS}")
        for i, p in enumerate(self.inclusions):
            for q in self.inclusions[i + 1:]:
                if np.hypot(p.center[0] - q.center[0], p.center[1] - q.center[1]) < p.radius + q.radius:
                    raise SceneError(f"inclusions at {p.center} and {q.center} overlap")


def build_scene(scene: PhantomScene, mesh: Mesh) -> ScalarField:
    """Nodal a(x): background outside the inclusions, contrast × background inside (closed disks)."""
    k2 = scene.background_k2
    a = np.full(mesh.n_nodes, k2)
    tol = 1e-9
    for inc in scene.inclusions:
        d = np.hypot(mesh.nodes[:, 0] - inc.center[0], mesh.nodes[:, 1] - inc.center[1])
        a[d <= inc.radius + tol] = inc.factor * k2
    return ScalarField(mesh, a, "coefficient", {"k2": k2})


def true_field(scene: PhantomScene, points) -> np.ndarray:
    """Scene coefficient evaluated at arbitrary points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    a = np.full(len(pts), scene.background_k2)
    for inc in scene.inclusions:
        d = np.hypot(pts[:, 0] - inc.center[0], pts[:, 1] - inc.center[1])
        a[d <= inc.radius + 1e-9] = inc.factor * scene.background_k2
    return a


@dataclass(frozen=True)
class SourceLayout:
    """Line sources (farthest first) and the three tail sources on the other sides."""

    line: tuple
    tail: tuple

    def __post_init__(self):
        s = [p.s for p in self.line]
        if len(s) < 2 or any(b >= a for a, b in zip(s, s[1:])):
            raise SceneError("line sources must be ordered by strictly decreasing distance")
        step = np.diff(s)
        if not np.allclose(step, step[0], rtol=1e-9, atol=1e-12):
            raise SceneError("line sources must be equally spaced")
        for p in self.line + self.tail:
            x, z = p.position
            if max(abs(x), abs(z)) <= OMEGA1_HALF_WIDTH or max(abs(x), abs(z)) >= OMEGA0_HALF_WIDTH:
                raise SceneError(f"source {p.id} at {p.position} must lie between the two squares")

    @property
    def sources(self) -> list:
        return sorted(self.line + self.tail, key=lambda p: p.id)

    @property
    def far(self) -> SourcePoint:
        """The farthest line source, at distance s̄."""
        return self.line[0]

    @property
    def spacing(self) -> float:
        return self.line[0].s - self.line[1].s

    def by_id(self, i: int) -> SourcePoint:
        for p in self.line + self.tail:
            if p.id == i:
                return p
        raise KeyError(i)


def default_layout(s_far: float = 20.0, spacing: float = 6.0, count: int = 3) -> SourceLayout:
    """Line sources on the positive x axis at 20, 14, 8 mm (ids 1-3); tail sources 4-6 at distance 20."""
    line = tuple(SourcePoint((s_far - i * spacing, 0.0), 1.0, i + 1) for i in range(count))
    tail = (
        SourcePoint((0.0, s_far), 1.0, count + 1),
        SourcePoint((-s_far, 0.0), 1.0, count + 2),
        SourcePoint((0.0, -s_far), 1.0, count + 3),
    )
    return SourceLayout(line, tail)


def group_scene(group: int, contrast: float = 3.0, background_k2: float = K2_BACKGROUND) -> PhantomScene:
    """Digital twins of the three experiment groups.

    Group 1: one 5 mm inclusion; group 2: one 3 mm inclusion; group 3: two
    3 mm inclusions.  Centres are artifact choices inside the disk.
    """
    if group == 1:
        inc = [Inclusion((0.0, 1.5), 2.5, contrast)]
    elif group == 2:
        inc = [Inclusion((0.0, 1.5), 1.5, contrast)]
    elif group == 3:
        inc = [Inclusion((-2.0, 1.0), 1.5, contrast), Inclusion((2.0, 1.0), 1.5, contrast)]
    else:
        raise SceneError(f"unknown group {group}")
    return PhantomScene(background_k2, inc)
