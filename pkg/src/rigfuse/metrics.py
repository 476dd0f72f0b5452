"""Evaluation metrics: reprojection depth error, multi-view consistency,
frame-to-frame cloud stability and per-stage throughput."""

from __future__ import annotations

import json
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Intrinsics, Pose


class UndefinedMetricError(ValueError):
    """The metric has no defined value for this input (e.g. nothing to average)."""


def _points_of(cloud) -> np.ndarray:
    pts = getattr(cloud, "points", cloud)
    return np.asarray(pts, dtype=float).reshape(-1, 3)


def render_point_depth(points, pose: Pose, intr: Intrinsics) -> np.ndarray:
    """Nearest-pixel splat of world points with a z-buffer; 0 where nothing lands."""
    pts = _points_of(points)
    img = np.full((intr.height, intr.width), np.inf)
    if len(pts):
        pc = pose.apply_inverse(pts)
        z = pc[:, 2]
        front = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = intr.fx * pc[:, 0] / z + intr.cx
            v = intr.fy * pc[:, 1] / z + intr.cy
        ok = front & intr.in_bounds(u, v)
        ui = np.rint(u[ok]).astype(np.int64)
        vi = np.rint(v[ok]).astype(np.int64)
        np.minimum.at(img, (vi, ui), z[ok])
    img[np.isinf(img)] = 0.0
    return img


def reprojection_depth_error(cloud, pose: Pose, intr: Intrinsics, depth) -> float:
    """Mean ``|D - D_hat|`` over pixels where both the measured depth and the
    splatted cloud depth are valid.

    ``depth`` may be a :class:`DepthFrame` or a plain array.
    """
    D = np.asarray(getattr(depth, "depth", depth), dtype=float)
    Dh = render_point_depth(cloud, pose, intr)
    omega = (D > 0) & (Dh > 0)
    if not omega.any():
        raise UndefinedMetricError("no pixel has both a measured and a reprojected depth")
    return float(np.mean(np.abs(D[omega] - Dh[omega])))


def geometric_consistency_error(tracks: Iterable) -> float:
    """Mean over tracked points of the mean squared deviation of the per-view
    positions from their centroid.

    ``tracks`` yields one ``(views, 3)`` array per tracked point.
    """
    per_point = []
    for t in tracks:
        t = np.asarray(t, dtype=float).reshape(-1, 3)
        if len(t) == 0:
            continue
        dev = t - t.mean(axis=0)
        per_point.append(np.mean(np.sum(dev * dev, axis=1)))
    if not per_point:
        raise UndefinedMetricError("no tracked points")
    return float(np.mean(per_point))


def packed_consistency_error(positions: np.ndarray, group: np.ndarray) -> float:
    """:func:`geometric_consistency_error` for flat positions labelled by track."""
    positions = np.asarray(positions, dtype=float)
    group = np.asarray(group)
    if len(positions) == 0:
        raise UndefinedMetricError("no tracked points")
    _, g = np.unique(group, return_inverse=True)
    m = g.max() + 1
    n = np.bincount(g, minlength=m).astype(float)
    mean = np.stack([np.bincount(g, weights=positions[:, a], minlength=m) for a in range(3)], axis=-1) / n[:, None]
    dev = positions - mean[g]
    msd = np.bincount(g, weights=np.sum(dev * dev, axis=1), minlength=m) / n
    return float(np.mean(msd))


def correspondence_consistency(corr, poses: Sequence[Pose]) -> float:
    """:func:`packed_consistency_error` over a calibration correspondence set."""
    if corr is None or len(corr) == 0:
        raise UndefinedMetricError("no correspondences")
    return packed_consistency_error(corr.observation_points(poses), corr.group)


def temporal_stability_error(cloud_t, cloud_next, radius: float = 0.05, static_mask=None) -> float:
    """Mean squared distance from points of ``cloud_t`` to their nearest
    neighbour in ``cloud_next``, over points that have one within ``radius``.

    ``static_mask`` optionally marks the points of ``cloud_t`` on static
    geometry; the others (moving objects) are left out.
    """
    a = _points_of(cloud_t)
    b = _points_of(cloud_next)
    if static_mask is not None:
        static_mask = np.asarray(static_mask, dtype=bool)
        if static_mask.shape != (len(a),):
            raise ValueError("static_mask needs one entry per point of cloud_t")
        a = a[static_mask]
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("empty cloud")
    d, _ = cKDTree(b).query(a, k=1, distance_upper_bound=radius)
    d = d[np.isfinite(d)]
    if len(d) == 0:
        raise UndefinedMetricError("no point has a neighbour within the radius")
    return float(np.mean(d * d))


# --- throughput -----------------------------------------------------------------------


class StageTimer:
    """Wall-clock latency per pipeline stage and per frame.

    Wrap each frame in :meth:`frame` and each stage inside it in :meth:`stage`.
    The first ``warmup`` frames are recorded but excluded from summaries.
    """

    def __init__(self, warmup: int = 5, clock=time.perf_counter):
        if warmup < 0:
            raise ValueError("warmup must be non-negative")
        self.warmup = warmup
        self.clock = clock
        self.frames: list[dict] = []
        self._current: dict | None = None

    @contextmanager
    def frame(self):
        self._current = {}
        t0 = self.clock()
        try:
            yield self
        finally:
            self._current["total"] = self.clock() - t0
            self.frames.append(self._current)
            self._current = None

    @contextmanager
    def stage(self, name: str):
        t0 = self.clock()
        try:
            yield
        finally:
            dt = self.clock() - t0
            if self._current is not None:
                self._current[name] = self._current.get(name, 0.0) + dt

    @property
    def timed_frames(self) -> list[dict]:
        return self.frames[self.warmup :]

    def summary(self) -> dict:
        return throughput(self.timed_frames)


def throughput(frames: Sequence[dict]) -> dict:
    """Mean / p95 latency (seconds) per stage and frames per second end-to-end.

    ``frames`` holds one mapping of stage name to seconds per frame; the
    ``total`` key is the end-to-end latency.
    """
    if not frames:
        raise UndefinedMetricError("no timed frames")
    names = sorted({k for f in frames for k in f})
    out = {}
    for k in names:
        xs = np.array([f.get(k, 0.0) for f in frames])
        out[k] = {"mean_s": float(xs.mean()), "p95_s": float(np.percentile(xs, 95))}
    total = out.get("total", {"mean_s": sum(v["mean_s"] for v in out.values())})["mean_s"]
    out["fps"] = float(1.0 / total) if total > 0 else math.inf
    return out


# --- report ---------------------------------------------------------------------------


def _nan_mean(xs) -> float | None:
    vals = [x for x in xs if x is not None and np.isfinite(x)]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    e_proj: float | None = None
    e_geom: float | None = None
    e_temp: float | None = None
    fps: float | None = None
    per_frame: dict = field(default_factory=lambda: {"e_proj": [], "e_geom": [], "e_temp": []})
    calibration: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def frame_count(self) -> int:
        return len(self.calibration)

    def finalize(self) -> MetricsReport:
        for k in ("e_proj", "e_geom", "e_temp"):
            setattr(self, k, _nan_mean(self.per_frame[k]))
        if self.timing and "fps" in self.timing:
            self.fps = self.timing["fps"]
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, **kw)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")
