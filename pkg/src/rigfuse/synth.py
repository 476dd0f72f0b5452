"""Synthetic multi-camera scenes rendered by analytic ray casting.

The renderer is the ground-truth oracle for the test-suite: every depth pixel
comes from an exact ray/primitive intersection, and the hit points are
returned alongside the depth so that reconstructions can be compared with the
true surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence, Union

import numpy as np

from .confidence import DepthFrame
from .geometry import Intrinsics, Pose, look_at


def _vec(a) -> np.ndarray:
    return np.asarray(a, dtype=float).reshape(3)


@dataclass(frozen=True, eq=False)
class Plane:
    """Rectangle (or infinite plane when ``size`` is None) through ``point``."""

    point: np.ndarray
    normal: np.ndarray
    size: tuple[float, float] | None = None
    axis: np.ndarray | None = None
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        n = _vec(self.normal)
        n = n / np.linalg.norm(n)
        object.__setattr__(self, "point", _vec(self.point))
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "velocity", _vec(self.velocity))
        a = self.axis
        if a is None:
            seed = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            a = seed
        a = _vec(a) - np.dot(_vec(a), n) * n
        object.__setattr__(self, "axis", a / np.linalg.norm(a))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray, offset: np.ndarray) -> np.ndarray:
        p0 = self.point + offset
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((p0 - origin) @ self.normal) / denom
        s = np.where(np.abs(denom) > 1e-12, s, np.inf)
        s = np.where(s > 1e-9, s, np.inf)
        if self.size is not None:
            hit = origin + np.where(np.isfinite(s), s, 0.0)[:, None] * dirs - p0
            a = hit @ self.axis
            b = hit @ np.cross(self.normal, self.axis)
            inside = (np.abs(a) <= self.size[0] / 2) & (np.abs(b) <= self.size[1] / 2)
            s = np.where(inside, s, np.inf)
        return s

    def distance(self, pts: np.ndarray, offset: np.ndarray) -> np.ndarray:
        rel = pts - (self.point + offset)
        h = rel @ self.normal
        if self.size is None:
            return np.abs(h)
        a = np.maximum(np.abs(rel @ self.axis) - self.size[0] / 2, 0.0)
        b = np.maximum(np.abs(rel @ np.cross(self.normal, self.axis)) - self.size[1] / 2, 0.0)
        return np.sqrt(h * h + a * a + b * b)


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "center", _vec(self.center))
        object.__setattr__(self, "velocity", _vec(self.velocity))

    def intersect(self, origin, dirs, offset):
        # dirs are not unit length: solve a s^2 + 2 b s + c = 0
        oc = origin - (self.center + offset)
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - a * c
        with np.errstate(invalid="ignore"):
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        s1 = (-b - sq) / a
        s2 = (-b + sq) / a
        s = np.where(s1 > 1e-9, s1, np.where(s2 > 1e-9, s2, np.inf))
        return np.where(disc >= 0, s, np.inf)

    def distance(self, pts, offset):
        return np.abs(np.linalg.norm(pts - (self.center + offset), axis=-1) - self.radius)


@dataclass(frozen=True, eq=False)
class Box:
    """Oriented box; ``pose`` maps box coordinates to world, centred on the box."""

    pose: Pose
    half_extents: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        h = _vec(self.half_extents)
        if np.any(h <= 0):
            raise ValueError("box half extents must be positive")
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "velocity", _vec(self.velocity))

    def intersect(self, origin, dirs, offset):
        R = self.pose.rotation
        o = (origin - self.pose.translation - offset) @ R
        d = dirs @ R
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-self.half_extents - o) * inv
            t2 = (self.half_extents - o) * inv
        # rays parallel to a slab: inside -> unbounded, outside -> miss
        par = d == 0
        inside_slab = np.abs(o) <= self.half_extents
        lo = np.where(par, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(par, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        tn = lo.max(axis=-1)
        tf = hi.min(axis=-1)
        hit = (tn <= tf) & (tf > 1e-9)
        s = np.where(tn > 1e-9, tn, tf)
        return np.where(hit, s, np.inf)

    def distance(self, pts, offset):
        p = np.abs((pts - self.pose.translation - offset) @ self.pose.rotation)
        q = p - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return np.abs(outside + inside)


Primitive = Union[Plane, Sphere, Box]


@dataclass(frozen=True)
class NoiseModel:
    sigma_abs: float = 0.0
    sigma_rel: float = 0.0
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.sigma_abs < 0 or self.sigma_rel < 0:
            raise ValueError("noise parameters must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def is_zero(self) -> bool:
        return self.sigma_abs == 0 and self.sigma_rel == 0 and self.dropout == 0


@dataclass(frozen=True)
class RigSpec:
    """Cameras on a horizontal arc around ``target``, all looking at it.

    ``arc_deg >= 360`` places the cameras on a full ring.
    """

    count: int
    intrinsics: Intrinsics
    radius: float = 2.4
    height: float = 1.5
    target: tuple[float, float, float] = (0.0, 0.0, 0.4)
    arc_deg: float = 90.0
    center_deg: float = 0.0

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("rig needs at least one camera")

    def angles_deg(self) -> np.ndarray:
        if self.count == 1:
            return np.array([self.center_deg])
        if self.arc_deg >= 360:
            return self.center_deg + np.arange(self.count) * 360.0 / self.count
        return self.center_deg + np.linspace(-self.arc_deg / 2, self.arc_deg / 2, self.count)

    def poses(self) -> list[Pose]:
        tx, ty, tz = self.target
        out = []
        for a in np.radians(self.angles_deg()):
            eye = [tx + self.radius * math.cos(a), ty + self.radius * math.sin(a), self.height]
            out.append(look_at(eye, self.target))
        return out


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    rig: RigSpec
    noise: NoiseModel = NoiseModel()
    seed: int = 0
    fps: float = 30.0
    name: str = "custom"

    def __post_init__(self) -> None:
        if len(self.primitives) < 1:
            raise ValueError("scene needs at least one primitive")

    @property
    def camera_count(self) -> int:
        return self.rig.count

    @property
    def intrinsics(self) -> Intrinsics:
        return self.rig.intrinsics

    def camera_poses(self) -> list[Pose]:
        return self.rig.poses()

    def with_(self, **kw) -> SceneSpec:
        return replace(self, **kw)


def _ray_grid(pose: Pose, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0 : intr.height, 0 : intr.width].astype(float)
    rays = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    rays = rays.reshape(-1, 3)
    # z-normalised camera rays: the ray parameter along them is the camera depth
    return pose.translation, rays @ pose.rotation.T


def cast(scene: SceneSpec, pose: Pose, frame_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-hit camera depth (H x W, 0 = miss) and world hit points (H x W x 3, NaN = miss)."""
    intr = scene.intrinsics
    origin, dirs = _ray_grid(pose, intr)
    best = np.full(len(dirs), np.inf)
    for prim in scene.primitives:
        s = prim.intersect(origin, dirs, frame_index * prim.velocity)
        np.minimum(best, s, out=best)
    hit = np.isfinite(best)
    depth = np.where(hit, best, 0.0)
    pts = np.full((len(dirs), 3), np.nan)
    # recompute hit points by back-projection so depth[p] == camera z of the point
    rays_c = dirs @ pose.rotation
    pts[hit] = pose.apply(rays_c[hit] * depth[hit, None])
    return depth.reshape(intr.shape), pts.reshape(intr.shape + (3,))


def render_depth(scene: SceneSpec, camera_index: int, frame_index: int = 0, noisy: bool = True):
    """Render one camera; returns ``(DepthFrame, hit_points)``.

    With ``noisy=True`` the scene's noise model is applied, seeded from
    ``(scene.seed, camera_index, frame_index)``.
    """
    pose = scene.camera_poses()[camera_index]
    depth, pts = cast(scene, pose, frame_index)
    frame = DepthFrame(camera_index, frame_index, depth, frame_index / scene.fps)
    if noisy and not scene.noise.is_zero:
        frame = apply_noise(frame, scene.noise, noise_rng(scene.seed, camera_index, frame_index))
    return frame, pts


def noise_rng(seed: int, camera_index: int, frame_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, camera_index, frame_index, 0x5EED])


def apply_noise(frame: DepthFrame, noise: NoiseModel, rng: np.random.Generator) -> DepthFrame:
    """Gaussian depth noise with ``sigma(z) = sigma_abs + sigma_rel z`` plus pixel dropout."""
    d = frame.depth
    valid = d > 0
    sigma = noise.sigma_abs + noise.sigma_rel * d
    out = d + rng.standard_normal(d.shape) * sigma
    if noise.dropout > 0:
        valid &= rng.random(d.shape) >= noise.dropout
    out = np.where(valid & (out > 0), out, 0.0)
    return DepthFrame(frame.camera_id, frame.frame_index, out, frame.timestamp)


def render_frameset(scene: SceneSpec, frame_index: int, noisy: bool = True) -> list[DepthFrame]:
    return [render_depth(scene, i, frame_index, noisy)[0] for i in range(scene.camera_count)]


def iter_frames(scene: SceneSpec, n_frames: int, start: int = 0, noisy: bool = True) -> Iterator[list[DepthFrame]]:
    """Lazily render synchronized frame-sets."""
    for f in range(start, start + n_frames):
        yield render_frameset(scene, f, noisy)


def surface_distance(scene: SceneSpec, points, frame_index: int = 0) -> np.ndarray:
    """Unsigned distance from world points to the nearest primitive surface."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    best = np.full(len(pts), np.inf)
    for prim in scene.primitives:
        np.minimum(best, prim.distance(pts, frame_index * prim.velocity), out=best)
    return best


# --- presets --------------------------------------------------------------------------

CAMERA_COUNTS = (1, 2, 4, 8)
PRESET_NAMES = ("structured", "complex", "dynamic")


def default_intrinsics(width: int = 160, height: int = 120) -> Intrinsics:
    return Intrinsics.from_fov(width, height, 70.0)


def _room() -> list[Primitive]:
    return [
        Plane([0.0, 0.0, 0.0], [0, 0, 1], size=(8.0, 8.0)),
        Plane([-2.0, 0.0, 1.5], [1, 0, 0], size=(6.0, 3.0), axis=[0, 1, 0]),
        Plane([0.0, -2.6, 1.5], [0, 1, 0], size=(8.0, 3.0)),
        Plane([0.0, 2.6, 1.5], [0, -1, 0], size=(8.0, 3.0)),
    ]


def _yaw(deg: float, t) -> Pose:
    a = math.radians(deg)
    R = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    return Pose.from_rt(R, t)


def structured_scene(cameras: int = 4, width: int = 160, height: int = 120, **kw) -> SceneSpec:
    prims = _room() + [
        Box(_yaw(20.0, [0.0, 0.0, 0.35]), [0.35, 0.3, 0.35]),
        Box(_yaw(0.0, [-1.1, 0.9, 0.3]), [0.4, 0.5, 0.3]),
        Box(_yaw(-10.0, [-1.2, -1.0, 0.6]), [0.25, 0.25, 0.6]),
    ]
    rig = RigSpec(cameras, default_intrinsics(width, height))
    return SceneSpec(tuple(prims), rig, name="structured", **kw)


def complex_scene(cameras: int = 4, width: int = 160, height: int = 120, **kw) -> SceneSpec:
    prims = [
        Plane([0.0, 0.0, 0.0], [0, 0, 1], size=(8.0, 8.0)),
        Plane([-2.0, 0.0, 1.5], [1, 0, 0], size=(6.0, 3.0), axis=[0, 1, 0]),
        Sphere([0.6, 0.0, 0.35], 0.25),
        Sphere([-0.3, 0.5, 0.5], 0.35),
        Sphere([-0.9, -0.6, 0.3], 0.3),
        Sphere([0.2, -0.7, 0.2], 0.2),
        Box(_yaw(30.0, [-0.4, -0.1, 0.3]), [0.3, 0.2, 0.3]),
        Box(_yaw(-25.0, [0.1, 0.9, 0.15]), [0.2, 0.3, 0.15]),
        Box(_yaw(5.0, [-1.3, 0.3, 0.7]), [0.2, 0.4, 0.7]),
    ]
    rig = RigSpec(cameras, default_intrinsics(width, height), arc_deg=120.0)
    return SceneSpec(tuple(prims), rig, name="complex", **kw)


def dynamic_scene(cameras: int = 4, width: int = 160, height: int = 120, speed: float = 0.01, **kw) -> SceneSpec:
    prims = _room()[:2] + [
        Box(_yaw(0.0, [-0.8, 0.6, 0.4]), [0.3, 0.3, 0.4]),
        Box(_yaw(0.0, [0.0, -0.6, 0.25]), [0.25, 0.25, 0.25], velocity=[0.0, speed, 0.0]),
    ]
    rig = RigSpec(cameras, default_intrinsics(width, height))
    return SceneSpec(tuple(prims), rig, name="dynamic", **kw)


_BUILDERS = {"structured": structured_scene, "complex": complex_scene, "dynamic": dynamic_scene}


def preset(name: str, cameras: int = 4, width: int = 160, height: int = 120, **kw) -> SceneSpec:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(_BUILDERS)}") from None
    return builder(cameras, width, height, **kw)


def standard_rigs(width: int = 160, height: int = 120, counts: Sequence[int] = CAMERA_COUNTS) -> dict:
    """All presets at every camera count, keyed by ``(name, count)``."""
    return {(name, n): preset(name, n, width, height) for name in PRESET_NAMES for n in counts}
