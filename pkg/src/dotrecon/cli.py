"""Command line front end: ``dotrecon synth|reconstruct|metrics|plot``.

Configuration is a flat ``key = value`` file.  Inclusions are given in
repeatable ``[inclusion]`` blocks; every other key belongs before the first
block.  Set ``DOTRECON_LOG`` (DEBUG, INFO, WARNING, ...) for log output.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

from . import fem, forward, mesh as meshmod, preprocess, scenes, stripping, tail

log = logging.getLogger("dotrecon")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4
LOG_ENV = "DOTRECON_LOG"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _contrast(s):
    return scenes.INF if s.strip().lower() in ("inf", "infinity") else float(s)


# name: (parser, default, units, description); default None means required
GLOBAL_KEYS = {
    "background_k2": (float, None, "1/mm^2", "background coefficient a_b = k^2 of the scene"),
    "s_far": (float, 20.0, "mm", "distance of the farthest line source"),
    "line_spacing": (float, 6.0, "mm", "spacing h of the line sources"),
    "line_count": (int, 3, "count", "number of line sources (N + 1)"),
    "noise": (float, 0.02, "fraction", "multiplicative Gaussian noise level"),
    "seed": (int, 0, "integer", "noise seed (overridden by --seed)"),
    "omega0_h": (float, 0.6, "mm", "node spacing of the outer square mesh"),
    "omega1_n": (int, 50, "cells per side", "grid size of the square around the disk"),
    "omega_h": (float, 0.2332, "mm", "ring spacing of the output disk mesh"),
    "eps": (float, 1e-5, "dimensionless", "stopping tolerance of the tail refinement"),
    "max_iter": (int, 100, "count", "iteration cap of the tail refinement"),
    "tail_variant": (str, "consistent", "consistent|printed", "large-distance inversion formula"),
    "calibrate": (_bool, True, "true|false", "calibrate k^2 and amplitude on the reference set"),
    "k2_min": (float, 1.5, "1/mm^2", "lower end of the calibration bracket"),
    "k2_max": (float, 3.5, "1/mm^2", "upper end of the calibration bracket"),
    "out": (str, "out", "path", "output directory (overridden by --out)"),
}
INCLUSION_KEYS = {
    "center_x": (float, None, "mm", "inclusion centre, x"),
    "center_z": (float, None, "mm", "inclusion centre, z"),
    "radius": (float, None, "mm", "inclusion radius"),
    "contrast": (_contrast, None, "a_incl / a_b", "contrast factor, or inf"),
}


@dataclass
class PipelineConfig:
    values: dict
    inclusions: list = field(default_factory=list)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def scene(self) -> scenes.PhantomScene:
        return scenes.PhantomScene(self.background_k2, list(self.inclusions))

    @property
    def layout(self) -> scenes.SourceLayout:
        return scenes.default_layout(self.s_far, self.line_spacing, self.line_count)

    @property
    def grid(self) -> stripping.SGrid:
        lay = self.layout
        return stripping.SGrid.from_knots([p.s for p in lay.line])


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    vals, incs = {}, []
    block = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if line != "[inclusion]":
                raise ConfigError(f"{source}:{n}: unknown block {line}")
            if block is not None:
                incs.append(_finish_inclusion(block, source))
            block = {"_line": n}
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        table = INCLUSION_KEYS if block is not None else GLOBAL_KEYS
        target = block if block is not None else vals
        if key not in table:
            where = "an [inclusion] block" if block is not None else "the global section"
            raise ConfigError(f"{source}:{n}: unknown key {key!r} in {where}")
        if key in target:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        try:
            target[key] = table[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{n}: bad value for {key}: {exc}") from None
    if block is not None:
        incs.append(_finish_inclusion(block, source))
    for key, (_, default, _, _) in GLOBAL_KEYS.items():
        if key not in vals:
            if default is None:
                raise ConfigError(f"{source}: missing required key {key!r}")
            vals[key] = default
    _check_ranges(vals, source)
    cfg = PipelineConfig(vals, incs)
    try:
        cfg.scene, cfg.layout, cfg.grid
    except (scenes.SceneError, stripping.GridError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def _finish_inclusion(block, source):
    missing = [k for k in INCLUSION_KEYS if k not in block]
    if missing:
        raise ConfigError(f"{source}:{block['_line']}: [inclusion] block lacks {', '.join(missing)}")
    try:
        return scenes.Inclusion((block["center_x"], block["center_z"]), block["radius"], block["contrast"])
    except scenes.SceneError as exc:
        raise ConfigError(f"{source}:{block['_line']}: {exc}") from None


def _check_ranges(v, source):
    rules = [
        ("background_k2", v["background_k2"] > 0, "must be positive"),
        ("noise", 0 <= v["noise"] <= 0.5, "must lie in [0, 0.5]"),
        ("omega0_h", 0.05 <= v["omega0_h"] <= 2.0, "must lie in [0.05, 2]"),
        ("omega1_n", 4 <= v["omega1_n"] <= 1000, "must lie in [4, 1000]"),
        ("omega_h", 0 < v["omega_h"] <= 2.0, "must lie in (0, 2]"),
        ("eps", 0 < v["eps"] <= 1e-2, "must lie in (0, 1e-2]"),
        ("max_iter", v["max_iter"] >= 2, "must be at least 2"),
        ("tail_variant", v["tail_variant"] in ("consistent", "printed"), "must be consistent or printed"),
        ("k2_min", 0 < v["k2_min"] < v["k2_max"], "must satisfy 0 < k2_min < k2_max"),
        ("line_count", v["line_count"] >= 2, "must be at least 2"),
        ("line_spacing", v["line_spacing"] > 0, "must be positive"),
    ]
    for key, ok, msg in rules:
        if not ok:
            raise ConfigError(f"{source}: {key} {msg}")


def load_config(path) -> PipelineConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def keys_help() -> str:
    rows = ["configuration keys (key = value; '#' starts a comment):"]
    for key, (_, default, units, desc) in GLOBAL_KEYS.items():
        d = "required" if default is None else f"default {default}"
        rows.append(f"  {key:<14} [{units}] {desc} ({d})")
    rows.append("repeatable [inclusion] block, all keys required:")
    for key, (_, _, units, desc) in INCLUSION_KEYS.items():
        rows.append(f"  {key:<14} [{units}] {desc}")
    rows.append(f"environment: {LOG_ENV}=DEBUG|INFO|WARNING sets log verbosity")
    rows.append(f"exit codes: {EXIT_OK} ok, {EXIT_VALIDATION} invalid input or config, "
                f"{EXIT_NUMERICAL} numerical failure, {EXIT_IO} file or format error")
    return "\n".join(rows)


# ---------------------------------------------------------------- pipeline pieces


def _meshes(cfg):
    m0 = forward.omega0_mesh(cfg.omega0_h)
    m1 = meshmod.square_grid(scenes.OMEGA1_HALF_WIDTH, cfg.omega1_n)
    disk = meshmod.disk_rings(scenes.OMEGA_RADIUS, cfg.omega_h)
    return m0, m1, disk


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (OSError, forward.FormatError, ConfigError):
        raise
    except Exception as exc:  # tag with the stage and re-raise
        raise StageError(name, exc) from exc


def cmd_synth(cfg: PipelineConfig, out: Path, seed: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    m0 = forward.omega0_mesh(cfg.omega0_h)
    k2 = cfg.background_k2
    srcs = cfg.layout.sources
    a = scenes.build_scene(cfg.scene, m0)
    data = _stage("synth", forward.synthesize_measurements, a, srcs, k2, cfg.noise, seed, method="direct")
    ref = _stage("synth", forward.synthesize_measurements, scenes.build_scene(scenes.PhantomScene(k2), m0),
                 srcs, k2, cfg.noise, seed + 1, method="direct")
    data.write(out / "measurements.csv")
    ref.write(out / "reference.csv")
    log.info("wrote %d traces to %s", len(srcs), out)
    return {"measurements": str(out / "measurements.csv"), "reference": str(out / "reference.csv")}


def run_pipeline(cfg: PipelineConfig, data: forward.MeasurementSet, reference=None):
    """Calibrate, smooth, build the tail, strip and recover; returns a dict of results."""
    m0, m1, disk = _meshes(cfg)
    lay = cfg.layout
    k2, amp = cfg.background_k2, 1.0
    calib = None
    if cfg.calibrate and reference is not None:
        calib = _stage("calibrate", preprocess.calibrate_k2, reference, m0, (cfg.k2_min, cfg.k2_max),
                       lay.far.id, rtol=1e-10, method="direct")
        k2, amp = calib.k2, calib.amplitude
        log.info("calibrated k2=%.6g amplitude=%.6g", k2, amp)
    data = data.scaled(1.0 / amp)
    bnd = meshmod.boundary_nodes(m1, meshmod.OUTER)
    ann = meshmod.annulus_of(m0)
    smoothed = _stage("smooth", preprocess.smooth_to_omega1, data, k2, ann, m1.nodes[bnd])
    tail_srcs = [lay.far] + list(lay.tail)
    T1, a1, p_edges = _stage("tail", tail.stage1_tail, smoothed, tail_srcs, lay.far, k2, m1, m0,
                             variant=cfg.tail_variant)
    res = _stage("tail", tail.stage2_refine, T1, a1, smoothed.intensities[lay.far.id], lay.far.s, k2,
                 cfg.eps, cfg.max_iter)
    res.p_inf = p_edges
    a, state, psi = _stage("strip", stripping.reconstruct, smoothed, cfg.grid, [p.id for p in lay.line],
                           res.T, k2, disk)
    report = _stage("metrics", stripping.metrics, a, cfg.scene, k2)
    report["calibrated_k2"] = k2
    report["amplitude"] = amp
    report["tail_iterations"] = res.m1
    return {"a": a, "tail": res, "report": report, "calibration": calib, "smoothed": smoothed, "state": state}


def cmd_reconstruct(cfg: PipelineConfig, out: Path, measurements=None, reference=None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    mpath = Path(measurements) if measurements else out / "measurements.csv"
    data = forward.MeasurementSet.read(mpath)
    ref = None
    rpath = Path(reference) if reference else out / "reference.csv"
    if cfg.calibrate:
        if rpath.exists():
            ref = forward.MeasurementSet.read(rpath)
        else:
            log.warning("no reference set at %s; using background_k2 and unit amplitude", rpath)
    r = run_pipeline(cfg, data, ref)
    meshmod.write_field_csv(r["a"], out / "a.csv")
    meshmod.write_pgm(r["a"], out / "a.pgm")
    meshmod.write_field_csv(r["tail"].T, out / "tail.csv")
    meshmod.write_field_csv(r["tail"].a_stage1, out / "tail_stage1_a.csv")
    r["tail"].write_history(out / "tail_history.csv")
    write_report(r["report"], out / "report.json", out / "report.csv")
    return r["report"]


def write_report(report, json_path, csv_path=None):
    with open(json_path, "w") as fh:
        fh.write(stripping.format_report(report) + "\n")
    if csv_path is None:
        return
    cen = report["centroid"] or [float("nan"), float("nan")]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true_contrast", "contrast", "relative_error", "centroid_x", "centroid_z",
                    "n_components", "center_distances"])
        rel = report["relative_error"]
        w.writerow([report["true_contrast"], repr(report["contrast"]), "" if rel is None else repr(rel),
                    repr(cen[0]), repr(cen[1]), report["n_components"],
                    ";".join("" if d is None else repr(d) for d in report["center_distances"])])


def field_from_csv(path) -> meshmod.ScalarField:
    """Field CSV back to a ScalarField on the Delaunay triangulation of its points."""
    try:
        pts, vals = meshmod.read_field_csv(path)
    except ValueError as exc:
        raise forward.FormatError(str(exc)) from None
    if len(pts) < 3:
        raise forward.FormatError(f"{path}: need at least 3 rows")
    tri = Delaunay(pts)
    tags = np.zeros(len(pts), dtype=np.int8)
    tags[np.unique(tri.convex_hull)] = meshmod.OUTER
    m = meshmod.Mesh(pts, tri.simplices, tags, 1.0)
    e, _ = m.edges()
    h = float(np.median(np.linalg.norm(pts[e[:, 0]] - pts[e[:, 1]], axis=1)))
    m = meshmod.Mesh(pts, _ccw(pts, tri.simplices), tags, h)
    return meshmod.ScalarField(m, vals, "coefficient")


def _ccw(pts, tris):
    p = pts[tris]
    d = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    tris = tris.copy()
    flip = d < 0
    tris[flip, 1], tris[flip, 2] = tris[flip, 2].copy(), tris[flip, 1].copy()
    return tris


def cmd_metrics(cfg: PipelineConfig, field_path, out: Path = None) -> dict:
    a = field_from_csv(field_path)
    report = stripping.metrics(a, cfg.scene, cfg.background_k2)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_report(report, out / "metrics.json", out / "metrics.csv")
    return report


def cmd_plot(field_path, out_path, resolution=128) -> dict:
    return meshmod.write_pgm(field_from_csv(field_path), out_path, resolution)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dotrecon", description="Synthetic diffuse optical tomography pipeline.",
                                epilog=keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="key = value configuration file")
    common.add_argument("--out", help="output directory (default: the config's 'out')")
    common.add_argument("--seed", type=int, help="noise seed (default: the config's 'seed')")
    kw = dict(epilog=keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub.add_parser("synth", parents=[common], help="write measurements.csv and reference.csv", **kw)
    r = sub.add_parser("reconstruct", parents=[common], help="reconstruct a(x) from measurements", **kw)
    r.add_argument("--measurements", help="measurement CSV (default: OUT/measurements.csv)")
    r.add_argument("--reference", help="homogeneous reference CSV (default: OUT/reference.csv)")
    m = sub.add_parser("metrics", parents=[common], help="score a field CSV against the configured scene", **kw)
    m.add_argument("field", help="field CSV with header x,z,value")
    pl = sub.add_parser("plot", help="rasterise a field CSV to PGM")
    pl.add_argument("field", help="field CSV with header x,z,value")
    pl.add_argument("--out", required=True, help="output .pgm path")
    pl.add_argument("--resolution", type=int, default=128, help="pixels per side")
    return p


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _classify(exc) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, (OSError, forward.FormatError)):
        return EXIT_IO
    numerical = (fem.NonConvergenceError, fem.PositivityError, fem.SingularSystemError, forward.ModelError,
                 tail.AsymptoticValidityError, preprocess.CalibrationError, stripping.RangeError,
                 FloatingPointError, OverflowError, ArithmeticError, np.linalg.LinAlgError, RuntimeError)
    if isinstance(cause, numerical):
        return EXIT_NUMERICAL
    return EXIT_VALIDATION


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            cmd_plot(args.field, args.out, args.resolution)
            return EXIT_OK
        cfg = load_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        out = Path(args.out if args.out else cfg.out)
        if args.command == "synth":
            cmd_synth(cfg, out, seed)
        elif args.command == "reconstruct":
            report = cmd_reconstruct(cfg, out, args.measurements, args.reference)
            print(stripping.format_report(report))
        else:
            report = cmd_metrics(cfg, args.field, out if args.out else None)
            print(stripping.format_report(report))
    except Exception as exc:
        code = _classify(exc)
        print(f"dotrecon {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
