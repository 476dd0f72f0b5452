"""Frame loop: priors, calibration, confidence, fusion and metrics per frame.

Frames are pulled lazily from a dataset directory or a synthetic preset; only
the current frame-set, the previous calibration state and the previous fused
cloud are held in memory.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io, synth
from .calibration import CalibrationState, SolverConfig, solve_frame
from .confidence import ConfidenceConfig, measurement_confidence
from .fusion import FusedCloud, FusionConfig, fuse_frame
from .geometry import relative_pose, rotation_geodesic_deg, translation_dist_m
from .metrics import (
    MetricsReport,
    StageTimer,
    UndefinedMetricError,
    correspondence_consistency,
    reprojection_depth_error,
    temporal_stability_error,
)
from .prior import RigConfig, SyntheticNoiseProvider

logger = logging.getLogger(__name__)

WORKERS_ENV = "RIGFUSE_WORKERS"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        logger.warning("ignoring non-integer %s=%r", WORKERS_ENV, raw)
        return 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str | None = None
    preset: str | None = None
    # synthetic source
    cameras: int = 4
    width: int = 160
    height: int = 120
    noise_abs: float = 0.0
    noise_rel: float = 0.0
    dropout: float = 0.0
    seed: int = 0
    # priors: "synthetic" perturbs ground truth, "file" replays the dataset's poses
    prior: str = "synthetic"
    prior_sigma_rot_deg: float = 0.0
    prior_sigma_trans: float = 0.0
    prior_static: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)
    confidence: ConfidenceConfig = field(default_factory=ConfidenceConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    output_dir: str | None = None
    write_ply: bool = True
    report_path: str | None = None
    start: int = 0
    frames: int | None = None
    workers: int = field(default_factory=default_workers)
    benchmark: bool = False
    strict: bool = True
    warmup: int = 5
    temporal_radius: float = 0.05

    def __post_init__(self) -> None:
        if (self.dataset is None) == (self.preset is None):
            raise ConfigError("exactly one of dataset or preset must be given")
        if self.preset is not None and self.preset not in synth.PRESET_NAMES:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {list(synth.PRESET_NAMES)}")
        if self.prior not in ("synthetic", "file"):
            raise ConfigError("prior must be 'synthetic' or 'file'")
        if self.prior == "file" and self.dataset is None:
            raise ConfigError("file priors need a dataset")
        if self.frames is not None and self.frames < 0:
            raise ConfigError("frames must be non-negative")
        if self.start < 0:
            raise ConfigError("start must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    # --- (de)serialization ---

    _NESTED = {"solver": SolverConfig, "confidence": ConfidenceConfig, "fusion": FusionConfig}

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        return d

    @classmethod
    def from_dict(cls, data: dict, base: PipelineConfig | None = None) -> PipelineConfig:
        """Build a config from ``data`` layered over ``base`` (or the defaults).

        Nested sections are merged key by key, so a partial ``solver`` block
        only changes the keys it names.
        """
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = base.to_dict() if base is not None else {}
        for k, v in data.items():
            if k in cls._NESTED:
                sub = dict(kw.get(k) or {})
                nested_known = {f.name for f in dataclasses.fields(cls._NESTED[k])}
                if not isinstance(v, dict):
                    raise ConfigError(f"section {k!r} must be an object")
                if set(v) - nested_known:
                    raise ConfigError(f"unknown keys in section {k!r}: {sorted(set(v) - nested_known)}")
                sub.update(v)
                kw[k] = sub
            else:
                kw[k] = v
        for k, typ in cls._NESTED.items():
            if k in kw and isinstance(kw[k], dict):
                sub = dict(kw[k])
                if "gate_schedule" in sub:
                    sub["gate_schedule"] = tuple(sub["gate_schedule"])
                try:
                    kw[k] = typ(**sub)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"section {k!r}: {exc}") from None
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def read_config_data(path) -> dict:
    """Raw JSON object of a config file, before any validation."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    return PipelineConfig.from_dict(read_config_data(path), base)


# --- sources --------------------------------------------------------------------------


@dataclass
class Source:
    rig: RigConfig
    frame_count: int
    read: callable  # frame index -> frame-set, loaded on demand
    provider: object
    ground_truth: callable | None


def scene_for(cfg: PipelineConfig) -> synth.SceneSpec:
    noise = synth.NoiseModel(cfg.noise_abs, cfg.noise_rel, cfg.dropout)
    return synth.preset(cfg.preset, cfg.cameras, cfg.width, cfg.height, noise=noise, seed=cfg.seed)


def open_source(cfg: PipelineConfig) -> Source:
    if cfg.dataset is not None:
        ds = io.load_dataset(cfg.dataset)
        gt = ds.ground_truth if ds.ground_truth_poses else None
        if cfg.prior == "file":
            provider = ds.prior_provider()
        else:
            if gt is None:
                raise ConfigError("synthetic priors need ground-truth poses in the dataset")
            provider = SyntheticNoiseProvider(gt, cfg.prior_sigma_rot_deg, cfg.prior_sigma_trans,
                                              cfg.seed, static=cfg.prior_static)
        return Source(ds.rig, ds.frame_count, ds.read_frame, provider, gt)
    scene = scene_for(cfg)
    gt_poses = scene.camera_poses()
    rig = RigConfig.shared(scene.intrinsics, gt_poses)
    provider = SyntheticNoiseProvider(gt_poses, cfg.prior_sigma_rot_deg, cfg.prior_sigma_trans,
                                      cfg.seed, static=cfg.prior_static)

    def read(f):
        return synth.render_frameset(scene, f)

    return Source(rig, -1, read, provider, lambda f: gt_poses)


# --- per-frame work -------------------------------------------------------------------


def pose_errors(poses, truth) -> dict:
    """Relative (to camera 0) rotation / translation error against ground truth."""
    if len(poses) < 2:
        return {"rot_deg": 0.0, "trans_m": 0.0}
    rot, tr = [], []
    for c in range(1, len(poses)):
        a = relative_pose(poses[0], poses[c])
        b = relative_pose(truth[0], truth[c])
        rot.append(rotation_geodesic_deg(a, b))
        tr.append(translation_dist_m(a, b))
    return {"rot_deg": float(max(rot)), "trans_m": float(max(tr))}


def frame_metrics(cloud: FusedCloud, state: CalibrationState, frames, intrinsics, previous_cloud, radius) -> dict:
    out = {}
    errs = []
    for pose, intr, fr in zip(state.poses, intrinsics, frames):
        try:
            errs.append(reprojection_depth_error(cloud, pose, intr, fr))
        except UndefinedMetricError:
            pass
    out["e_proj"] = float(np.mean(errs)) if errs else None
    try:
        out["e_geom"] = correspondence_consistency(state.correspondences, state.poses)
    except UndefinedMetricError:
        out["e_geom"] = None
    out["e_temp"] = None
    if previous_cloud is not None:
        try:
            out["e_temp"] = temporal_stability_error(previous_cloud, cloud, radius)
        except UndefinedMetricError:
            pass
    return out


class Pipeline:
    """Stateful frame processor; :func:`run` drives it over a source."""

    def __init__(self, cfg: PipelineConfig, rig: RigConfig, provider):
        self.cfg = cfg
        self.rig = rig
        self.provider = provider
        self.state: CalibrationState | None = None
        self.timer = StageTimer(cfg.warmup)
        self._pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _map(self, fn, items):
        return list(self._pool.map(fn, items)) if self._pool is not None else [fn(x) for x in items]

    def process(self, frame_index: int, frames) -> tuple[CalibrationState, FusedCloud]:
        cfg = self.cfg
        intr = list(self.rig.intrinsics)
        if len(frames) != self.rig.count:
            raise ValueError(f"frame-set has {len(frames)} cameras, rig has {self.rig.count}")
        with self.timer.frame():
            with self.timer.stage("confidence"):
                confs = self._map(lambda f: measurement_confidence(f, cfg.confidence), frames)
            with self.timer.stage("prior"):
                priors = self.provider.provide_priors(frame_index, self.rig)
            with self.timer.stage("calibration"):
                state = solve_frame(priors, self.state, frames, confs, intr, cfg.solver)
            with self.timer.stage("fusion"):
                cloud = fuse_frame(frames, confs, state.poses, intr, cfg.fusion, self._pool)
        cloud.frame_index = frame_index
        self.state = state
        return state, cloud


def run(cfg: PipelineConfig) -> MetricsReport:
    """Process the configured frame range and return the metrics report."""
    source = open_source(cfg)
    start = cfg.start
    if source.frame_count >= 0:
        stop = source.frame_count if cfg.frames is None else min(source.frame_count, start + cfg.frames)
    else:
        stop = start + (cfg.frames if cfg.frames is not None else 1)
    report = MetricsReport()
    report.diagnostics = {"degraded_frames": [], "errors": [], "dropped_groups": 0, "fused_points": []}
    if stop <= start:
        return report.finalize()
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    previous_cloud = None
    with Pipeline(cfg, source.rig, source.provider) as pipe:
        for f in range(start, stop):
            try:
                frames = source.read(f)
                state, cloud = pipe.process(f, frames)
            except Exception as exc:
                if cfg.strict:
                    raise
                logger.error("frame %d failed: %s", f, exc)
                report.diagnostics["errors"].append({"frame": f, "error": f"{type(exc).__name__}: {exc}"})
                continue
            entry = {
                "frame": f,
                "cost": state.cost,
                "initial_cost": state.initial_cost,
                "iterations": state.iterations,
                "terms": dict(state.cost_terms),
                "degraded": state.degraded,
                "correspondences": 0 if state.correspondences is None else len(state.correspondences),
            }
            if source.ground_truth is not None:
                entry["pose_error"] = pose_errors(state.poses, source.ground_truth(f))
            report.calibration.append(entry)
            if state.degraded:
                report.diagnostics["degraded_frames"].append(f)
            report.diagnostics["dropped_groups"] += cloud.diagnostics.get("dropped_groups", 0)
            report.diagnostics["fused_points"].append(len(cloud))
            if not cfg.benchmark:
                m = frame_metrics(cloud, state, frames, source.rig.intrinsics, previous_cloud, cfg.temporal_radius)
                for k, v in m.items():
                    report.per_frame[k].append(v)
            if out_dir is not None and cfg.write_ply:
                io.write_ply(cloud, out_dir / f"cloud_{f:06d}.ply")
            previous_cloud = cloud
        try:
            report.timing = pipe.timer.summary()
        except UndefinedMetricError:
            report.timing = {}
    report.finalize()
    if cfg.report_path:
        report.write(cfg.report_path)
    return report


# --- benchmark ------------------------------------------------------------------------


def linear_fit(xs, ys) -> dict:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    A = np.column_stack([xs, np.ones_like(xs)])
    (slope, intercept), *_ = np.linalg.lstsq(A, ys, rcond=None)
    pred = A @ [slope, intercept]
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2}


def bench(preset: str = "structured", counts=synth.CAMERA_COUNTS, width: int = 640, height: int = 480,
          frames: int = 5, warmup: int = 2, cfg: PipelineConfig | None = None) -> dict:
    """End-to-end per-frame latency for each camera count on a static preset.

    Each count renders one frame-set and replays it ``warmup + frames`` times
    (rendering is outside the timed region); priors are redrawn every frame.
    """
    base = cfg if cfg is not None else PipelineConfig(preset=preset, prior_sigma_rot_deg=1.0, prior_sigma_trans=0.01)
    rows = []
    for n in counts:
        c = dataclasses.replace(base, preset=preset, dataset=None, cameras=n, width=width, height=height,
                                warmup=warmup, benchmark=True)
        scene = scene_for(c)
        fs = synth.render_frameset(scene, 0)
        gt = scene.camera_poses()
        rig = RigConfig.shared(scene.intrinsics, gt)
        provider = SyntheticNoiseProvider(gt, c.prior_sigma_rot_deg, c.prior_sigma_trans, c.seed)
        with Pipeline(c, rig, provider) as pipe:
            for f in range(warmup + frames):
                pipe.process(f, fs)
            summary = pipe.timer.summary()
        rows.append({
            "cameras": n,
            "mean_s": summary["total"]["mean_s"],
            "p95_s": summary["total"]["p95_s"],
            "fps": summary["fps"],
            "stages": {k: v for k, v in summary.items() if k not in ("total", "fps")},
        })
    fit = linear_fit([r["cameras"] for r in rows], [r["mean_s"] for r in rows])
    return {"preset": preset, "width": width, "height": height, "frames": frames, "warmup": warmup,
            "rows": rows, "fit": fit}
