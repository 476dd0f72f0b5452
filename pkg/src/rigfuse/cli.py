"""Command-line entry point: ``rigfuse run | synth-export | bench | metrics``.

Settings resolve as built-in defaults, then ``--config FILE``, then flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io, synth
from .pipeline import ConfigError, PipelineConfig, bench, default_workers, read_config_data, run
from .prior import SyntheticNoiseProvider

# flag dest -> (section or None, config key)
_FLAG_MAP = {
    "dataset": (None, "dataset"),
    "preset": (None, "preset"),
    "cameras": (None, "cameras"),
    "width": (None, "width"),
    "height": (None, "height"),
    "noise_abs": (None, "noise_abs"),
    "noise_rel": (None, "noise_rel"),
    "dropout": (None, "dropout"),
    "seed": (None, "seed"),
    "prior": (None, "prior"),
    "prior_sigma_rot": (None, "prior_sigma_rot_deg"),
    "prior_sigma_trans": (None, "prior_sigma_trans"),
    "prior_static": (None, "prior_static"),
    "output": (None, "output_dir"),
    "write_ply": (None, "write_ply"),
    "report": (None, "report_path"),
    "start": (None, "start"),
    "frames": (None, "frames"),
    "workers": (None, "workers"),
    "strict": (None, "strict"),
    "warmup": (None, "warmup"),
    "temporal_radius": (None, "temporal_radius"),
    "lam": ("solver", "lam"),
    "mu": ("solver", "mu"),
    "max_iterations": ("solver", "max_iterations"),
    "damping_init": ("solver", "damping_init"),
    "convergence_tol": ("solver", "convergence_tol"),
    "huber_delta": ("solver", "huber_delta"),
    "anchor": ("solver", "anchor_first_camera"),
    "samples": ("solver", "samples_per_camera"),
    "association_rounds": ("solver", "association_rounds"),
    "alpha": ("confidence", "alpha"),
    "beta": ("confidence", "beta"),
    "gamma": ("confidence", "gamma"),
    "delta": ("confidence", "delta"),
    "window": ("confidence", "window"),
    "tau": ("confidence", "tau"),
    "eps_abs": ("confidence", "eps_abs"),
    "eps_rel": ("confidence", "eps_rel"),
    "radius": ("fusion", "radius"),
}

# flags that feed more than one section
_SHARED = {"tau": ("solver", "fusion"), "eps_abs": ("solver", "fusion"), "eps_rel": ("solver", "fusion")}


def _add_source_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("input")
    g.add_argument("--dataset", default=S, help="dataset directory (rig.json + cam*/depth_*.png)")
    g.add_argument("--preset", default=S, choices=synth.PRESET_NAMES, help="synthetic scene preset")
    g.add_argument("--cameras", type=int, default=S)
    g.add_argument("--width", type=int, default=S)
    g.add_argument("--height", type=int, default=S)
    g.add_argument("--noise-abs", type=float, default=S, help="depth noise, metres")
    g.add_argument("--noise-rel", type=float, default=S, help="depth noise, fraction of depth")
    g.add_argument("--dropout", type=float, default=S)
    g.add_argument("--seed", type=int, default=S)
    g = p.add_argument_group("priors")
    g.add_argument("--prior", choices=("synthetic", "file"), default=S)
    g.add_argument("--prior-sigma-rot", type=float, default=S, help="degrees")
    g.add_argument("--prior-sigma-trans", type=float, default=S, help="metres")
    g.add_argument("--prior-static", action=argparse.BooleanOptionalAction, default=S)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON config file (flags override it)")
    _add_source_flags(p)
    g = p.add_argument_group("solver")
    g.add_argument("--lam", type=float, default=S, help="geometric weight")
    g.add_argument("--mu", type=float, default=S, help="temporal weight")
    g.add_argument("--max-iterations", type=int, default=S)
    g.add_argument("--damping-init", type=float, default=S)
    g.add_argument("--convergence-tol", type=float, default=S)
    g.add_argument("--huber-delta", type=float, default=S, help="pixels")
    g.add_argument("--anchor", action=argparse.BooleanOptionalAction, default=S,
                   help="hold camera 0 at its prior")
    g.add_argument("--samples", type=int, default=S, help="correspondence samples per camera")
    g.add_argument("--association-rounds", type=int, default=S)
    g = p.add_argument_group("confidence and fusion")
    for name in ("alpha", "beta", "gamma", "delta"):
        g.add_argument(f"--{name}", type=float, default=S)
    g.add_argument("--window", type=int, default=S)
    g.add_argument("--tau", type=float, default=S, help="confidence gate")
    g.add_argument("--eps-abs", type=float, default=S, help="depth tolerance, metres")
    g.add_argument("--eps-rel", type=float, default=S, help="depth tolerance, fraction")
    g.add_argument("--radius", type=float, default=S, help="grouping radius, metres")
    g = p.add_argument_group("output")
    g.add_argument("--output", default=S, help="directory for per-frame PLY clouds")
    g.add_argument("--write-ply", action=argparse.BooleanOptionalAction, default=S)
    g.add_argument("--report", default=S, help="path of the JSON metrics report")
    g.add_argument("--start", type=int, default=S)
    g.add_argument("--frames", type=int, default=S)
    g.add_argument("--workers", type=int, default=S, help="per-camera parallelism (env RIGFUSE_WORKERS)")
    g.add_argument("--strict", action=argparse.BooleanOptionalAction, default=S,
                   help="abort on frame errors and fail on degraded frames")
    g.add_argument("--warmup", type=int, default=S)
    g.add_argument("--temporal-radius", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rigfuse", description="Self-calibrating multi-camera depth fusion.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="process a dataset or synthetic preset")
    _add_run_flags(r)

    e = sub.add_parser("synth-export", help="write a synthetic sequence as a dataset")
    e.add_argument("out", help="output dataset directory")
    e.add_argument("--preset", default="structured", choices=synth.PRESET_NAMES)
    e.add_argument("--cameras", type=int, default=4)
    e.add_argument("--width", type=int, default=160)
    e.add_argument("--height", type=int, default=120)
    e.add_argument("--frames", type=int, default=10)
    e.add_argument("--noise-abs", type=float, default=0.0)
    e.add_argument("--noise-rel", type=float, default=0.0)
    e.add_argument("--dropout", type=float, default=0.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--prior-sigma-rot", type=float, default=0.0, help="perturb stored priors (degrees)")
    e.add_argument("--prior-sigma-trans", type=float, default=0.0, help="perturb stored priors (metres)")

    b = sub.add_parser("bench", help="latency versus camera count")
    b.add_argument("--preset", default="structured", choices=synth.PRESET_NAMES)
    b.add_argument("--counts", type=int, nargs="+", default=list(synth.CAMERA_COUNTS))
    b.add_argument("--width", type=int, default=640)
    b.add_argument("--height", type=int, default=480)
    b.add_argument("--frames", type=int, default=5)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--workers", type=int, default=None)
    b.add_argument("--report", help="write the scaling table as JSON")

    m = sub.add_parser("metrics", help="summarize a metrics report")
    m.add_argument("report", help="JSON report written by 'run'")
    return p


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    overrides: dict = {}
    for dest, (section, key) in _FLAG_MAP.items():
        if not hasattr(args, dest):
            continue
        value = getattr(args, dest)
        sections = _SHARED.get(dest, ()) + ((section,) if section else ())
        if not section:
            overrides[key] = value
        for sec in sections:
            overrides.setdefault(sec, {})[key] = value
    merged = read_config_data(args.config) if args.config else {}
    # flags win over the file
    for k, v in overrides.items():
        if isinstance(v, dict):
            merged[k] = {**merged.get(k, {}), **v}
        else:
            merged[k] = v
    if "dataset" in overrides and "preset" not in overrides:
        merged["preset"] = None
    if "preset" in overrides and "dataset" not in overrides:
        merged["dataset"] = None
    if merged.get("dataset") is None and merged.get("preset") is None:
        merged["preset"] = "structured"
    return PipelineConfig.from_dict(merged)


def _summary_lines(report: dict) -> list[str]:
    def fmt(x, unit=""):
        return "undefined" if x is None else f"{x:.6g}{unit}"

    lines = [
        f"frames: {len(report.get('calibration', []))}",
        f"e_proj: {fmt(report.get('e_proj'), ' m')}",
        f"e_geom: {fmt(report.get('e_geom'), ' m^2')}",
        f"e_temp: {fmt(report.get('e_temp'), ' m^2')}",
        f"fps: {fmt(report.get('fps'))}",
    ]
    diag = report.get("diagnostics", {})
    if diag.get("degraded_frames"):
        lines.append(f"degraded frames: {diag['degraded_frames']}")
    if diag.get("errors"):
        lines.append(f"failed frames: {[e['frame'] for e in diag['errors']]}")
    return lines


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    report = run(cfg)
    for line in _summary_lines(report.to_dict()):
        print(line)
    if cfg.strict and (report.diagnostics.get("degraded_frames") or report.diagnostics.get("errors")):
        return 2
    return 0


def cmd_export(args) -> int:
    scene = synth.preset(args.preset, args.cameras, args.width, args.height,
                         noise=synth.NoiseModel(args.noise_abs, args.noise_rel, args.dropout), seed=args.seed)
    gt = scene.camera_poses()
    priors = gt
    if args.prior_sigma_rot > 0 or args.prior_sigma_trans > 0:
        prov = SyntheticNoiseProvider(gt, args.prior_sigma_rot, args.prior_sigma_trans, args.seed, static=True)
        priors = [p.pose for p in prov.provide_priors(0)]
    root = io.export_scene(scene, args.out, args.frames, priors=priors)
    print(f"wrote {args.frames} frames x {args.cameras} cameras to {root}")
    return 0


def cmd_bench(args) -> int:
    base = PipelineConfig(preset=args.preset, prior_sigma_rot_deg=1.0, prior_sigma_trans=0.01,
                          workers=args.workers or default_workers())
    table = bench(args.preset, args.counts, args.width, args.height, args.frames, args.warmup, base)
    print(f"{'cameras':>8} {'mean ms':>10} {'p95 ms':>10} {'fps':>8}")
    for r in table["rows"]:
        print(f"{r['cameras']:>8} {1e3 * r['mean_s']:>10.1f} {1e3 * r['p95_s']:>10.1f} {r['fps']:>8.2f}")
    fit = table["fit"]
    print(f"linear fit: {1e3 * fit['slope']:.1f} ms/camera + {1e3 * fit['intercept']:.1f} ms, R^2 = {fit['r2']:.4f}")
    if args.report:
        Path(args.report).write_text(json.dumps(table, indent=2), encoding="utf-8")
    return 0


def cmd_metrics(args) -> int:
    try:
        report = json.loads(Path(args.report).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read report {args.report}: {exc}", file=sys.stderr)
        return 1
    for line in _summary_lines(report):
        print(line)
    timing = report.get("timing") or {}
    for stage, v in sorted(timing.items()):
        if isinstance(v, dict):
            print(f"  {stage}: mean {1e3 * v['mean_s']:.2f} ms, p95 {1e3 * v['p95_s']:.2f} ms")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "synth-export": cmd_export, "bench": cmd_bench, "metrics": cmd_metrics}
    try:
        return handlers[args.command](args)
    except (ConfigError, io.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
