"""Per-pixel measurement confidence and per-point visibility."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import Intrinsics, Pose, project


@dataclass(frozen=True, eq=False)
class DepthFrame:
    """One camera's depth observation. ``depth`` is H x W meters, 0 = invalid."""

    camera_id: int
    frame_index: int
    depth: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        d = np.asarray(self.depth, dtype=float)
        if d.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("depth contains non-finite values")
        if np.any(d < 0):
            raise ValueError("depth contains negative values")
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class ConfidenceConfig:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0
    delta: float = 1.0
    window: int = 5
    tau: float = 0.6
    eps_abs: float = 0.005
    eps_rel: float = 0.01

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "delta", "eps_abs", "eps_rel"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")

    def depth_tolerance(self, depth):
        return np.maximum(self.eps_abs, self.eps_rel * np.asarray(depth, dtype=float))


def _axis_gradient(d: np.ndarray, valid: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Central difference along ``axis`` with one-sided fallback.

    Returns the derivative and a mask of pixels that had at least one valid
    neighbour along that axis.
    """
    n = d.shape[axis]
    pad = [(0, 0), (0, 0)]
    pad[axis] = (1, 1)
    dp = np.pad(d, pad)
    vp = np.pad(valid, pad)
    sl = [slice(None), slice(None)]
    sl[axis] = slice(2, n + 2)
    fwd_d, fwd_v = dp[tuple(sl)], vp[tuple(sl)]
    sl[axis] = slice(0, n)
    bwd_d, bwd_v = dp[tuple(sl)], vp[tuple(sl)]

    grad = np.zeros_like(d)
    both = fwd_v & bwd_v
    only_f = fwd_v & ~bwd_v
    only_b = bwd_v & ~fwd_v
    grad[both] = (fwd_d[both] - bwd_d[both]) / 2.0
    grad[only_f] = fwd_d[only_f] - d[only_f]
    grad[only_b] = d[only_b] - bwd_d[only_b]
    return grad, fwd_v | bwd_v


def depth_gradient(frame: DepthFrame | np.ndarray) -> np.ndarray:
    """Depth-gradient magnitude in meters per pixel.

    Invalid pixels and pixels without any valid 4-neighbour get ``inf``.
    """
    d = frame.depth if isinstance(frame, DepthFrame) else np.asarray(frame, dtype=float)
    valid = d > 0
    gu, has_u = _axis_gradient(d, valid, axis=1)
    gv, has_v = _axis_gradient(d, valid, axis=0)
    g = np.sqrt(gu * gu + gv * gv)
    g[~(has_u | has_v) | ~valid] = np.inf
    return g


def _box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window around each pixel, zero-padded at borders."""
    h, w = a.shape
    p = np.pad(a, r)
    rows = np.zeros((h, w + 2 * r))
    for k in range(2 * r + 1):
        rows += p[k : k + h, :]
    out = np.zeros((h, w))
    for k in range(2 * r + 1):
        out += rows[:, k : k + w]
    return out


def local_sigma(frame: DepthFrame | np.ndarray, window: int = 5) -> np.ndarray:
    """Population standard deviation of valid depths in a window x window neighbourhood.

    Fewer than two valid samples in the window gives ``inf``.
    """
    d = frame.depth if isinstance(frame, DepthFrame) else np.asarray(frame, dtype=float)
    valid = d > 0
    if not valid.any():
        return np.full(d.shape, np.inf)
    # shift by a valid sample to limit cancellation in E[x^2] - E[x]^2
    ref = d[valid].flat[0]
    x = np.where(valid, d - ref, 0.0)
    r = window // 2
    n = _box_sum(valid.astype(float), r)
    s1 = _box_sum(x, r)
    s2 = _box_sum(x * x, r)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = s1 / n
        var = np.maximum(s2 / n - mean * mean, 0.0)
    sigma = np.sqrt(var)
    # windows holding a single repeated value are exactly flat, whatever the rounding
    size = 2 * r + 1
    hi = ndimage.maximum_filter(np.where(valid, d, -np.inf), size, mode="constant", cval=-np.inf)
    lo = ndimage.minimum_filter(np.where(valid, d, np.inf), size, mode="constant", cval=np.inf)
    sigma[hi == lo] = 0.0
    sigma[n < 2] = np.inf
    return sigma


def raw_confidence(gradient, sigma, cfg: ConfidenceConfig = ConfidenceConfig()) -> np.ndarray:
    """Unclamped ``alpha / (1 + beta G) + gamma / (1 + delta sigma)``; inf inputs give 0 terms."""
    gradient = np.asarray(gradient, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    with np.errstate(invalid="ignore"):
        t1 = np.where(np.isinf(gradient), 0.0, cfg.alpha / (1.0 + cfg.beta * gradient))
        t2 = np.where(np.isinf(sigma), 0.0, cfg.gamma / (1.0 + cfg.delta * sigma))
    return t1 + t2


def measurement_confidence(frame: DepthFrame, cfg: ConfidenceConfig = ConfidenceConfig()) -> np.ndarray:
    """H x W confidence map in [0, 1]; zero wherever depth is invalid."""
    G = depth_gradient(frame)
    sigma = local_sigma(frame, cfg.window)
    c = np.clip(raw_confidence(G, sigma, cfg), 0.0, 1.0)
    c[~frame.valid] = 0.0
    return c


def gate_mask(frame: DepthFrame, conf: np.ndarray, tau: float) -> np.ndarray:
    """Pixels kept by confidence gating: valid depth and ``C > tau``."""
    return frame.valid & (conf > tau)


def visibility(points, pose: Pose, intr: Intrinsics, depth: np.ndarray, cfg: ConfidenceConfig = ConfidenceConfig()):
    """Visibility of world points in one camera.

    Returns ``(visible, u_pix, v_pix)``: a boolean array and the nearest-pixel
    indices of the projections (-1 where the point falls outside the image or
    behind the camera).
    """
    pts = np.asarray(points, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    pr = project(pose, intr, pts)
    inside = pr.in_front & intr.in_bounds(pr.col, pr.row)
    ui = np.full(len(pts), -1, dtype=np.int64)
    vi = np.full(len(pts), -1, dtype=np.int64)
    ui[inside] = np.rint(pr.col[inside]).astype(np.int64)
    vi[inside] = np.rint(pr.row[inside]).astype(np.int64)
    vis = np.zeros(len(pts), dtype=bool)
    idx = np.flatnonzero(inside)
    dz = depth[vi[idx], ui[idx]]
    z = pr.depth[idx]
    vis[idx] = (dz > 0) & (z < dz + cfg.depth_tolerance(z))
    ui[~inside] = -1
    vi[~inside] = -1
    if scalar:
        return bool(vis[0]), int(ui[0]), int(vi[0])
    return vis, ui, vi
