"""Sources of initial per-frame extrinsic estimates.

A provider stands in for a learned pose regressor: it hands the calibration
solver one starting pose per camera for each frame.  Two providers ship with
the package: a synthetic one that perturbs ground truth with seeded noise,
and a file-backed one that replays poses stored with a dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .geometry import Intrinsics, Pose, exp


class MissingPriorError(LookupError):
    """No prior is available for the requested frame/camera."""


@dataclass(frozen=True)
class PriorEstimate:
    camera_id: int
    pose: Pose
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.weight >= 0:
            raise ValueError("prior weight must be non-negative")


@dataclass(frozen=True)
class RigConfig:
    """Per-camera intrinsics and static prior poses, indexed by camera id."""

    intrinsics: tuple
    priors: tuple
    camera_ids: tuple | None = None

    def __post_init__(self) -> None:
        n = len(self.intrinsics)
        if n < 1:
            raise ValueError("rig needs at least one camera")
        if len(self.priors) != n:
            raise ValueError("one prior pose per camera is required")
        ids = tuple(range(n)) if self.camera_ids is None else tuple(self.camera_ids)
        if len(ids) != n or len(set(ids)) != n:
            raise ValueError("camera ids must be distinct, one per camera")
        object.__setattr__(self, "intrinsics", tuple(self.intrinsics))
        object.__setattr__(self, "priors", tuple(self.priors))
        object.__setattr__(self, "camera_ids", ids)

    @property
    def count(self) -> int:
        return len(self.intrinsics)

    @classmethod
    def shared(cls, intr: Intrinsics, poses: Sequence[Pose]) -> RigConfig:
        return cls(tuple(intr for _ in poses), tuple(poses))


class PriorProvider(Protocol):
    def provide_priors(self, frame_index: int, rig: RigConfig) -> list[PriorEstimate]: ...


def perturb_pose(pose: Pose, sigma_rot_deg: float, sigma_trans: float, rng: np.random.Generator) -> Pose:
    """Left-multiply ``pose`` by ``exp(xi)`` with ``xi ~ N(0, diag(sr^2 I, st^2 I))``."""
    if sigma_rot_deg < 0 or sigma_trans < 0:
        raise ValueError("noise sigmas must be non-negative")
    w = rng.standard_normal(3) * math.radians(sigma_rot_deg)
    v = rng.standard_normal(3) * sigma_trans
    if sigma_rot_deg == 0 and sigma_trans == 0:
        return pose
    return exp(np.concatenate([w, v])).compose(pose)


def expected_rotation_deviation_deg(sigma_rot_deg: float) -> float:
    """Mean geodesic angle of :func:`perturb_pose` noise (Maxwell mean, 3 dof)."""
    return sigma_rot_deg * 2.0 * math.sqrt(2.0 / math.pi)


class SyntheticNoiseProvider:
    """Ground truth plus seeded tangent-space noise.

    ``ground_truth`` is either a list of poses (static rig) or a callable
    ``frame_index -> list of poses``.  Each (frame, camera) draw uses its own
    generator derived from ``seed``, so calls are deterministic and safe to
    issue concurrently or out of order.
    """

    def __init__(self, ground_truth, sigma_rot_deg: float = 0.0, sigma_trans: float = 0.0,
                 seed: int = 0, weight: float = 1.0, static: bool = False):
        if sigma_rot_deg < 0 or sigma_trans < 0:
            raise ValueError("noise sigmas must be non-negative")
        self._gt = ground_truth
        self.sigma_rot_deg = sigma_rot_deg
        self.sigma_trans = sigma_trans
        self.seed = seed
        self.weight = weight
        # static=True draws one perturbation per camera and reuses it every frame
        self.static = static

    def ground_truth(self, frame_index: int) -> list[Pose]:
        gt = self._gt(frame_index) if callable(self._gt) else self._gt
        return list(gt)

    def provide_priors(self, frame_index: int, rig: RigConfig | None = None) -> list[PriorEstimate]:
        gt = self.ground_truth(frame_index)
        if rig is not None and len(gt) != rig.count:
            raise ValueError(f"ground truth has {len(gt)} cameras, rig has {rig.count}")
        ids = rig.camera_ids if rig is not None else tuple(range(len(gt)))
        stream = 0 if self.static else frame_index
        out = []
        for cam, pose in zip(ids, gt):
            rng = np.random.default_rng([self.seed, stream, cam, 0x9A10])
            out.append(PriorEstimate(cam, perturb_pose(pose, self.sigma_rot_deg, self.sigma_trans, rng), self.weight))
        return out


class FilePriorProvider:
    """Replays per-frame prior poses, falling back to a rig's static priors.

    ``frame_priors`` maps camera id to a per-frame list of poses.  Cameras
    absent from the mapping use ``rig.priors`` for every frame; cameras present
    but lacking the requested frame raise :class:`MissingPriorError`.
    """

    def __init__(self, frame_priors: dict | None = None, weight: float = 1.0):
        self.frame_priors = dict(frame_priors or {})
        self.weight = weight

    def provide_priors(self, frame_index: int, rig: RigConfig) -> list[PriorEstimate]:
        out = []
        for k, cam in enumerate(rig.camera_ids):
            seq = self.frame_priors.get(cam)
            if seq is None:
                pose = rig.priors[k]
            else:
                if not 0 <= frame_index < len(seq) or seq[frame_index] is None:
                    raise MissingPriorError(f"no prior for camera {cam} at frame {frame_index}")
                pose = seq[frame_index]
            out.append(PriorEstimate(cam, pose, self.weight))
        return out
