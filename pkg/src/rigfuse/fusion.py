"""Confidence- and visibility-weighted fusion of per-camera depth into one cloud.

Per frame: every camera's confident pixels are back-projected into the world
(a fragment), observations of the same surface point are grouped with a
transient spatial hash, each member is weighted by confidence times
visibility, and each group collapses to its weighted mean.  Nothing persists
between frames.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .confidence import ConfidenceConfig, DepthFrame, visibility
from .geometry import Intrinsics, Pose


class ZeroSupportError(ValueError):
    """Every member of a group has zero confidence-times-visibility."""


@dataclass(frozen=True)
class FusionConfig:
    radius: float = 0.01
    tau: float = 0.6
    eps_abs: float = 0.005
    eps_rel: float = 0.01

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError("grouping radius must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.eps_abs < 0 or self.eps_rel < 0:
            raise ValueError("depth tolerances must be non-negative")

    def visibility_config(self) -> ConfidenceConfig:
        return ConfidenceConfig(tau=self.tau, eps_abs=self.eps_abs, eps_rel=self.eps_rel)


@dataclass(frozen=True, eq=False)
class PointFragment:
    """Gated world points of one camera, in row-major pixel order."""

    camera_id: int
    points: np.ndarray
    pixels: np.ndarray
    confidence: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("fragment points must be finite")
        pix = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        conf = np.asarray(self.confidence, dtype=float).reshape(-1)
        if not len(pts) == len(pix) == len(conf):
            raise ValueError("points, pixels and confidence must have equal length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "pixels", pix)
        object.__setattr__(self, "confidence", conf)

    def __len__(self) -> int:
        return len(self.points)


def generate_fragment(frame: DepthFrame, conf: np.ndarray, pose: Pose, intr: Intrinsics, tau: float = 0.6) -> PointFragment:
    """Back-project every pixel with valid depth and confidence above ``tau``."""
    conf = np.asarray(conf, dtype=float)
    if conf.shape != frame.shape:
        raise ValueError(f"confidence shape {conf.shape} does not match depth {frame.shape}")
    v, u = np.nonzero(frame.valid & (conf > tau))
    d = frame.depth[v, u]
    pc = np.stack([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d], axis=-1)
    return PointFragment(frame.camera_id, pose.apply(pc), np.column_stack([u, v]), conf[v, u])


# --- grouping -------------------------------------------------------------------------


@dataclass(eq=False)
class Grouping:
    """Group labels over the concatenation of several fragments.

    ``label[k]`` is the group of observation ``k``; groups are numbered in the
    order their seeds were chosen and ``seed[g]`` is the observation that
    founded group ``g``.
    """

    points: np.ndarray
    camera: np.ndarray
    confidence: np.ndarray
    label: np.ndarray
    seed: np.ndarray

    def __len__(self) -> int:
        return len(self.seed)

    def members(self, group_id: int) -> np.ndarray:
        return np.flatnonzero(self.label == group_id)

    def groups(self) -> list[ObservationGroup]:
        order = np.argsort(self.label, kind="stable")
        bounds = np.searchsorted(self.label[order], np.arange(len(self) + 1))
        return [
            ObservationGroup(order[bounds[g] : bounds[g + 1]], int(self.seed[g]))
            for g in range(len(self))
        ]


@dataclass(frozen=True, eq=False)
class ObservationGroup:
    members: np.ndarray
    seed: int


def _stack_fragments(fragments: Sequence[PointFragment]):
    # by camera id, so the listing order of cameras cannot leak into sums
    fragments = sorted(fragments, key=lambda f: f.camera_id)
    if not fragments:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0)
    pts = np.concatenate([f.points for f in fragments])
    cam = np.concatenate([np.full(len(f), f.camera_id, dtype=np.int64) for f in fragments])
    conf = np.concatenate([f.confidence for f in fragments])
    return pts, cam, conf


def canonical_order(camera: np.ndarray) -> np.ndarray:
    """Seed visiting order: by camera id, then row-major pixel order within a camera.

    Fragments keep row-major order, so this depends neither on the order the
    cameras are listed in nor on the world frame.
    """
    return np.argsort(camera, kind="stable")


def _cell_keys(points: np.ndarray, radius: float):
    """Linear hash-cell index of every point plus the padded grid extent."""
    cells = np.floor(points / radius).astype(np.int64)
    lo = cells.min(axis=0) - 1
    span = cells.max(axis=0) - lo + 2
    if float(np.prod(span.astype(float))) >= 2.0**62:
        raise ValueError("point extent too large for the grouping radius")
    c = cells - lo
    return (c[:, 0] * span[1] + c[:, 1]) * span[2] + c[:, 2], span


@numba.njit(cache=True)
def _group_hashed(pts, cam, order, bucket, cell_keys, cell_start, point_key, span1, span2, r2, n_cams):
    n = len(order)
    label = np.full(n, -1, np.int64)
    rank = np.empty(n, np.int64)
    for r in range(n):
        rank[order[r]] = r
    seeds = np.empty(n, np.int64)
    best_d = np.empty(n_cams)
    best_k = np.empty(n_cams, np.int64)
    n_groups = 0
    for r in range(n):
        s = order[r]
        if label[s] >= 0:
            continue
        label[s] = n_groups
        seeds[n_groups] = s
        for c in range(n_cams):
            best_d[c] = np.inf
            best_k[c] = -1
        key = point_key[s]
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(-1, 2):
                    nk = key + (dx * span1 + dy) * span2 + dz
                    ci = np.searchsorted(cell_keys, nk)
                    if ci >= len(cell_keys) or cell_keys[ci] != nk:
                        continue
                    for q in range(cell_start[ci], cell_start[ci + 1]):
                        k = bucket[q]
                        if label[k] >= 0 or cam[k] == cam[s]:
                            continue
                        d0 = pts[k, 0] - pts[s, 0]
                        d1 = pts[k, 1] - pts[s, 1]
                        d2 = pts[k, 2] - pts[s, 2]
                        d = d0 * d0 + d1 * d1 + d2 * d2
                        if d > r2:
                            continue
                        c = cam[k]
                        if d < best_d[c] or (d == best_d[c] and rank[k] < rank[best_k[c]]):
                            best_d[c] = d
                            best_k[c] = k
        for c in range(n_cams):
            if best_k[c] >= 0:
                label[best_k[c]] = n_groups
        n_groups += 1
    return label, seeds[:n_groups].copy()


def group_observations(fragments: Sequence[PointFragment], radius: float = 0.01) -> Grouping:
    """Greedy seeded grouping over a transient spatial hash of cell size ``radius``.

    Points are visited in :func:`canonical_order` (the hash only accelerates
    the radius search).  An unassigned point founds a new group; from every
    other camera, the unassigned point nearest to the seed (within
    ``radius``) joins it.  A group therefore holds at most
    one observation per camera and every observation lies within ``radius``
    of its seed.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    pts, cam, conf = _stack_fragments(fragments)
    if len(pts) == 0:
        return Grouping(pts, cam, conf, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    ids, cam_index = np.unique(cam, return_inverse=True)
    order = canonical_order(cam)
    keys, span = _cell_keys(pts, radius)
    bucket = np.argsort(keys, kind="stable")
    cell_keys, cell_start = np.unique(keys[bucket], return_index=True)
    cell_start = np.append(cell_start, len(keys)).astype(np.int64)
    label, seeds = _group_hashed(
        pts, cam_index.astype(np.int64), order, bucket, cell_keys, cell_start, keys,
        np.int64(span[1]), np.int64(span[2]), radius * radius, len(ids),
    )
    return Grouping(pts, cam, conf, label, seeds)


def group_observations_bruteforce(fragments: Sequence[PointFragment], radius: float = 0.01) -> Grouping:
    """O(n^2) reference for :func:`group_observations` (same rule, no hash)."""
    pts, cam, conf = _stack_fragments(fragments)
    n = len(pts)
    label = np.full(n, -1, dtype=np.int64)
    seeds = []
    order = canonical_order(cam)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    r2 = radius * radius
    for s in order:
        if label[s] >= 0:
            continue
        g = len(seeds)
        label[s] = g
        seeds.append(s)
        best: dict[int, tuple[float, int, int]] = {}
        for k in range(n):
            if label[k] >= 0 or cam[k] == cam[s]:
                continue
            d0 = pts[k, 0] - pts[s, 0]
            d1 = pts[k, 1] - pts[s, 1]
            d2 = pts[k, 2] - pts[s, 2]
            d = d0 * d0 + d1 * d1 + d2 * d2
            if d <= r2:
                cand = (d, rank[k], k)
                if cam[k] not in best or cand < best[cam[k]]:
                    best[cam[k]] = cand
        for _, _, k in best.values():
            label[k] = g
    return Grouping(pts, cam, conf, label, np.array(seeds, dtype=np.int64))


# --- weights and fusion ---------------------------------------------------------------


def compute_weights(confidence, visible) -> np.ndarray:
    """``C V / sum(C V)`` over the members of one group."""
    cv = np.asarray(confidence, dtype=float) * np.asarray(visible, dtype=float)
    total = cv.sum()
    if not total > 0:
        raise ZeroSupportError("no member of the group has positive confidence and visibility")
    return cv / total


def group_visibility(grouping: Grouping, poses: dict, intrinsics: dict, depths: dict, cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    """Visibility of each member's group seed in the member's own camera."""
    vis = np.zeros(len(grouping.label), dtype=bool)
    seed_pts = grouping.points[grouping.seed[grouping.label]]
    vcfg = cfg.visibility_config()
    for c in np.unique(grouping.camera):
        m = grouping.camera == c
        vis[m] = visibility(seed_pts[m], poses[c], intrinsics[c], depths[c], vcfg)[0]
    return vis


def group_weights(label: np.ndarray, confidence: np.ndarray, visible: np.ndarray, n_groups: int):
    """Vectorized :func:`compute_weights` for all groups.

    Returns per-member weights (zero in dropped groups), per-group support
    ``sum(C V)`` and a mask of groups with positive support.
    """
    cv = confidence * visible.astype(float)
    support = np.bincount(label, weights=cv, minlength=n_groups)
    keep = support > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(keep[label], cv / support[label], 0.0)
    return w, support, keep


def fuse(points: np.ndarray, label: np.ndarray, weights: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Per kept group, ``sum(w P)``; ``weights`` must already be normalized per group."""
    n_groups = len(keep)
    out = np.stack([np.bincount(label, weights=weights * points[:, a], minlength=n_groups) for a in range(3)], axis=-1)
    return out[keep]


@dataclass(eq=False)
class FusedCloud:
    points: np.ndarray
    weight: np.ndarray
    count: np.ndarray
    frame_index: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, frame_index: int = 0) -> FusedCloud:
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64), frame_index)


def fuse_groups(grouping: Grouping, visible: np.ndarray, frame_index: int = 0) -> FusedCloud:
    n = len(grouping)
    w, support, keep = group_weights(grouping.label, grouping.confidence, visible, n)
    pts = fuse(grouping.points, grouping.label, w, keep)
    count = np.bincount(grouping.label, weights=(w > 0).astype(float), minlength=n)[keep].astype(np.int64)
    diag = {
        "input_points": int(len(grouping.label)),
        "groups": int(n),
        "dropped_groups": int(n - keep.sum()),
    }
    return FusedCloud(pts, support[keep], count, frame_index, diag)


def fuse_frame(
    frames: Sequence[DepthFrame],
    confidences: Sequence[np.ndarray],
    poses: Sequence[Pose],
    intrinsics: Sequence[Intrinsics],
    cfg: FusionConfig = FusionConfig(),
    executor: Executor | None = None,
) -> FusedCloud:
    """Fragments, grouping, weights and fusion for one synchronized frame-set.

    ``poses`` may also be a calibration state (anything with ``.poses``).
    With an ``executor``, fragments are generated concurrently per camera;
    the result does not depend on it.
    """
    poses = list(getattr(poses, "poses", poses))
    if not len(frames) == len(confidences) == len(poses) == len(intrinsics):
        raise ValueError("frames, confidences, poses and intrinsics must have one entry per camera")
    frame_index = frames[0].frame_index if frames else 0

    def make(k):
        return generate_fragment(frames[k], confidences[k], poses[k], intrinsics[k], cfg.tau)

    ks = range(len(frames))
    fragments = list(executor.map(make, ks)) if executor is not None else [make(k) for k in ks]
    grouping = group_observations(fragments, cfg.radius)
    if len(grouping) == 0:
        cloud = FusedCloud.empty(frame_index)
        cloud.diagnostics = {"input_points": 0, "groups": 0, "dropped_groups": 0}
        return cloud
    ids = [f.camera_id for f in frames]
    vis = group_visibility(
        grouping,
        dict(zip(ids, poses)),
        dict(zip(ids, intrinsics)),
        {f.camera_id: f.depth for f in frames},
        cfg,
    )
    cloud = fuse_groups(grouping, vis, frame_index)
    cloud.diagnostics["gated_points"] = {int(f.camera_id): len(fr) for f, fr in zip(frames, fragments)}
    return cloud
