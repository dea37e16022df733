"""Shared meshes, scenes and cached pipeline runs."""
import math
import time

import numpy as np
import pytest

from dotrecon import cli, forward, mesh, scenes

K2 = scenes.K2_BACKGROUND


def k0_series(y, terms=50):
    """Independent ascending-series K0 used as an oracle (math.fsum, 50 terms)."""
    q = 0.25 * y * y
    term, harmonic = 1.0, 0.0
    i0, acc = [1.0], []
    for k in range(1, terms):
        term *= q / (k * k)
        harmonic += 1.0 / k
        i0.append(term)
        acc.append(term * harmonic)
    return -(math.log(0.5 * y) + 0.57721566490153286061) * math.fsum(i0) + math.fsum(acc)


@pytest.fixture(scope="session")
def omega0():
    return forward.omega0_mesh(0.6)


@pytest.fixture(scope="session")
def annulus(omega0):
    return mesh.annulus_of(omega0)


@pytest.fixture(scope="session")
def omega1():
    return mesh.square_grid(scenes.OMEGA1_HALF_WIDTH, 50)


@pytest.fixture(scope="session")
def disk():
    return mesh.disk_rings(scenes.OMEGA_RADIUS, 0.2332)


@pytest.fixture(scope="session")
def layout():
    return scenes.default_layout()


@pytest.fixture(scope="session")
def rim_targets(omega1):
    return omega1.nodes[mesh.boundary_nodes(omega1, mesh.OUTER)]


@pytest.fixture(scope="session")
def homogeneous_data(omega0, layout):
    a = scenes.build_scene(scenes.PhantomScene(), omega0)
    return forward.synthesize_measurements(a, layout.sources, K2, noise=0.0, seed=0, method="direct")


def config_text(inclusions=(), noise=0.02, seed=0, extra=""):
    lines = [f"background_k2 = {K2}", f"noise = {noise}", f"seed = {seed}", extra]
    for inc in inclusions:
        c = "inf" if math.isinf(inc.contrast) else repr(inc.contrast)
        lines += ["[inclusion]", f"center_x = {inc.center[0]!r}", f"center_z = {inc.center[1]!r}",
                  f"radius = {inc.radius!r}", f"contrast = {c}"]
    return "\n".join(lines) + "\n"


ACCEPTANCE_SCENES = {
    "homogeneous": scenes.PhantomScene(),
    "group1-c2": scenes.group_scene(1, 2.0),
    "group1-c3": scenes.group_scene(1, 3.0),
    "group1-c4": scenes.group_scene(1, 4.0),
    "group1-inf": scenes.group_scene(1, scenes.INF),
    "group3-c3": scenes.group_scene(3, 3.0),
}


class PipelineRuns:
    """Runs each acceptance scene once (2 % noise, seed 7) and keeps the results."""

    def __init__(self, root):
        self.root = root
        self._cache = {}

    def __call__(self, name):
        if name not in self._cache:
            scene = ACCEPTANCE_SCENES[name]
            cfg = cli.parse_config(config_text(scene.inclusions, noise=0.02, seed=7), name)
            out = self.root / name
            t = time.perf_counter()
            cli.cmd_synth(cfg, out, 7)
            data = forward.MeasurementSet.read(out / "measurements.csv")
            ref = forward.MeasurementSet.read(out / "reference.csv")
            res = cli.run_pipeline(cfg, data, ref)
            res["seconds"] = time.perf_counter() - t
            self._cache[name] = res
        return self._cache[name]


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    return PipelineRuns(tmp_path_factory.mktemp("runs"))


def assert_close_rel(x, ref, rtol):
    x, ref = np.asarray(x, dtype=float), np.asarray(ref, dtype=float)
    err = np.max(np.abs(x - ref) / np.abs(ref))
    assert err <= rtol, f"relative error {err:.3e} > {rtol:.1e}"


CRITERIA = {}


def record_criterion(number, ok, detail):
    CRITERIA[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
