"""Camera and rigid-motion primitives.

Conventions used throughout the package:

* A :class:`Pose` maps **camera coordinates to world coordinates**,
  ``X_world = R @ X_cam + t``.  Projection therefore applies the inverse pose.
* Camera frames follow the pinhole/OpenCV layout: x right, y down, z forward.
* Pixel centers sit at integer coordinates and ``(0, 0)`` is the top-left
  pixel.  A continuous coordinate ``u`` belongs to pixel ``round(u)``.
* Twists are 6-vectors ``[omega, v]``: axis-angle rotation (radians) first,
  translation part (meters) second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

_SMALL_ANGLE = 1e-8
_SERIES_ANGLE = 1e-2
LOG_ANGLE_LIMIT = math.pi - 1e-6


class InvalidDepthError(ValueError):
    """Raised when back-projecting a pixel with non-positive depth."""


class NearSingularError(ValueError):
    """Raised when the SE(3) logarithm is requested at a rotation angle near pi."""


def hat(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector, or of a stack of them (..., 3)."""
    omega = np.asarray(omega, dtype=float)
    out = np.zeros(omega.shape[:-1] + (3, 3))
    out[..., 0, 1] = -omega[..., 2]
    out[..., 0, 2] = omega[..., 1]
    out[..., 1, 0] = omega[..., 2]
    out[..., 1, 2] = -omega[..., 0]
    out[..., 2, 0] = -omega[..., 1]
    out[..., 2, 1] = omega[..., 0]
    return out


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(quat: np.ndarray) -> np.ndarray:
    w, x, y, z = quat
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(rot: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a unit quaternion with non-negative w."""
    rot = np.asarray(rot, dtype=float)
    tr = rot[0, 0] + rot[1, 1] + rot[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array(
            [0.25 * s, (rot[2, 1] - rot[1, 2]) / s, (rot[0, 2] - rot[2, 0]) / s, (rot[1, 0] - rot[0, 1]) / s]
        )
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = 2.0 * math.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2])
        q = np.array(
            [(rot[2, 1] - rot[1, 2]) / s, 0.25 * s, (rot[0, 1] + rot[1, 0]) / s, (rot[0, 2] + rot[2, 0]) / s]
        )
    elif rot[1, 1] > rot[2, 2]:
        s = 2.0 * math.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2])
        q = np.array(
            [(rot[0, 2] - rot[2, 0]) / s, (rot[0, 1] + rot[1, 0]) / s, 0.25 * s, (rot[1, 2] + rot[2, 1]) / s]
        )
    else:
        s = 2.0 * math.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1])
        q = np.array(
            [(rot[1, 0] - rot[0, 1]) / s, (rot[0, 2] + rot[2, 0]) / s, (rot[1, 2] + rot[2, 1]) / s, 0.25 * s]
        )
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from camera to world coordinates.

    Rotation is kept as a unit quaternion ``(w, x, y, z)``; the matrix is
    materialised on demand.
    """

    quat: np.ndarray
    translation: np.ndarray
    _R: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / n
        if q[0] < 0:
            q = -q
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "quat", _frozen(q))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "_R", _frozen(quat_to_matrix(q)))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, rotation, translation) -> Pose:
        R = np.asarray(rotation, dtype=float)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if abs(np.linalg.det(R) - 1.0) > 1e-6 or not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("rotation matrix is not orthonormal with det +1")
        return cls(matrix_to_quat(R), translation)

    @classmethod
    def from_matrix(cls, matrix) -> Pose:
        matrix = np.asarray(matrix, dtype=float)
        return cls.from_rt(matrix[:3, :3], matrix[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return self._R

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self._R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        qc = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(qc, -(self._R.T @ self.translation))

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        q = _quat_multiply(self.quat, other.quat)
        return Pose(q, self._R @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        """Map camera-frame points (..., 3) into the world frame."""
        return np.asarray(points, dtype=float) @ self._R.T + self.translation

    def apply_inverse(self, points) -> np.ndarray:
        """Map world-frame points (..., 3) into the camera frame."""
        return (np.asarray(points, dtype=float) - self.translation) @ self._R

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self) -> str:
        q = np.array2string(self.quat, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Pose(quat={q}, translation={t})"


def compose(first: Pose, second: Pose) -> Pose:
    return first.compose(second)


def inverse(pose: Pose) -> Pose:
    return pose.inverse()


# --- SO(3) / SE(3) exponential maps -------------------------------------------------


def _so3_coeffs(theta: float) -> tuple[float, float, float]:
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) with small-angle series."""
    t2 = theta * theta
    if theta < _SERIES_ANGLE:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / t2
        c = (theta - math.sin(theta)) / (t2 * theta)
    return a, b, c


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    _, b, c = _so3_coeffs(theta)
    W = hat(omega)
    return np.eye(3) + b * W + c * (W @ W)


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        k = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        k = 1.0 / (theta * theta) - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * W + k * (W @ W)


def _quat_from_rotvec(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    half = 0.5 * theta
    if theta < _SERIES_ANGLE:
        h2 = half * half
        s = 0.5 * (1.0 - h2 / 6.0 + h2 * h2 / 120.0)
    else:
        s = math.sin(half) / theta
    return np.array([math.cos(half), s * w[0], s * w[1], s * w[2]])


def _rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    w, v = q[0], q[1:]
    if w < 0:
        w, v = -w, -v
    n = float(np.linalg.norm(v))
    if n < _SMALL_ANGLE:
        # theta = 2 atan2(n, w) ~ 2 n / w
        return (2.0 / w) * v
    theta = 2.0 * math.atan2(n, w)
    return (theta / n) * v


def exp(xi) -> Pose:
    """SE(3) exponential of a twist ``[omega, v]``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    return Pose(_quat_from_rotvec(w), so3_left_jacobian(w) @ v)


def log(pose: Pose) -> np.ndarray:
    """SE(3) logarithm; inverse of :func:`exp` for rotation angles below pi."""
    w = _rotvec_from_quat(pose.quat)
    if np.linalg.norm(w) >= LOG_ANGLE_LIMIT:
        raise NearSingularError("rotation angle too close to pi for a unique logarithm")
    return np.concatenate([w, so3_left_jacobian_inv(w) @ pose.translation])


def _se3_q_block(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Off-diagonal block of the SE(3) left Jacobian (coupling of v into translation)."""
    theta = float(np.linalg.norm(w))
    t2 = theta * theta
    W, V = hat(w), hat(v)
    if theta < _SERIES_ANGLE:
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / (t2 * theta)
        c2 = (t2 / 2.0 + c - 1.0) / (t2 * t2)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta)
    WV = W @ V
    VW = V @ W
    WVW = WV @ W
    return (
        0.5 * V
        + c1 * (WV + VW + WVW)
        + c2 * (W @ WV + VW @ W - 3.0 * WVW)
        + c3 * (WVW @ W + W @ WVW)
    )


def se3_left_jacobian(xi) -> np.ndarray:
    """6x6 left Jacobian in ``[omega, v]`` ordering."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    Jw = so3_left_jacobian(w)
    J = np.zeros((6, 6))
    J[:3, :3] = Jw
    J[3:, 3:] = Jw
    J[3:, :3] = _se3_q_block(w, v)
    return J


def se3_right_jacobian_inv(xi) -> np.ndarray:
    """Inverse right Jacobian: ``log(exp(xi) exp(d)) ≈ xi + Jr^-1(xi) d``."""
    xi = -np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    Ji = so3_left_jacobian_inv(w)
    Q = _se3_q_block(w, v)
    J = np.zeros((6, 6))
    J[:3, :3] = Ji
    J[3:, 3:] = Ji
    J[3:, :3] = -Ji @ Q @ Ji
    return J


def adjoint(pose: Pose) -> np.ndarray:
    """Adjoint in ``[omega, v]`` ordering: ``p exp(xi) p^-1 = exp(Ad_p xi)``."""
    R = pose.rotation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = hat(pose.translation) @ R
    return A


def interpolate(start: Pose, end: Pose, fraction: float) -> Pose:
    """Geodesic blend ``start exp(fraction log(start^-1 end))``; 0 gives start, 1 gives end."""
    if fraction == 0:
        return start
    return start.compose(exp(fraction * log(start.inverse().compose(end))))


# --- camera model -------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> Intrinsics:
        f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def camera_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def in_bounds(self, cols, rows) -> np.ndarray:
        """True where ``(cols, rows)`` rounds to a pixel inside the image."""
        cols = np.asarray(cols)
        rows = np.asarray(rows)
        return (cols >= -0.5) & (cols < self.width - 0.5) & (rows >= -0.5) & (rows < self.height - 0.5)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


class Projection(NamedTuple):
    col: np.ndarray
    row: np.ndarray
    depth: np.ndarray
    in_front: np.ndarray


def project(pose: Pose, intr: Intrinsics, points) -> Projection:
    """Project world points (..., 3) into the camera.

    Points with camera-frame depth ``z <= 0`` are flagged via ``in_front=False``
    and get NaN pixel coordinates; this is not an error.
    """
    pc = pose.apply_inverse(points)
    z = pc[..., 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(in_front, z, np.nan)
        u = intr.fx * pc[..., 0] / zs + intr.cx
        v = intr.fy * pc[..., 1] / zs + intr.cy
    return Projection(u, v, z, in_front)


def camera_points(intr: Intrinsics, cols, rows, depth) -> np.ndarray:
    """``K^-1 (d * [u, v, 1])`` in the camera frame."""
    cols = np.asarray(cols, dtype=float)
    rows = np.asarray(rows, dtype=float)
    d = np.asarray(depth, dtype=float)
    x = (cols - intr.cx) / intr.fx * d
    y = (rows - intr.cy) / intr.fy * d
    return np.stack(np.broadcast_arrays(x, y, d), axis=-1)


def back_project(pose: Pose, intr: Intrinsics, cols, rows, depth) -> np.ndarray:
    """World point(s) ``T K^-1 (d * [u, v, 1])`` for pixel(s) with positive depth."""
    d = np.asarray(depth, dtype=float)
    if np.any(~(d > 0)):
        raise InvalidDepthError("back-projection requires strictly positive depth")
    return pose.apply(camera_points(intr, cols, rows, d))


def pixel_grid(intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel-center coordinates ``(u, v)`` as H x W float grids."""
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    return u.astype(float), v.astype(float)


# --- pose error metrics -------------------------------------------------------------


def rotation_geodesic_deg(first: Pose, second: Pose) -> float:
    """Geodesic angle between two rotations, in degrees."""
    # atan2 on the relative quaternion equals arccos((tr(Ra^T Rb) - 1) / 2) but
    # keeps full precision near zero
    q = _quat_multiply(first.quat * np.array([1.0, -1.0, -1.0, -1.0]), second.quat)
    return math.degrees(2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0]))))


def translation_dist_m(first: Pose, second: Pose) -> float:
    return float(np.linalg.norm(first.translation - second.translation))


def relative_pose(reference: Pose, other: Pose) -> Pose:
    """Pose of ``other`` expressed in the frame of ``reference``."""
    return reference.inverse().compose(other)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at ``eye`` looking at ``target`` (z forward, y down)."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    down = -np.asarray(up, dtype=float)
    x = np.cross(down, z)
    n = np.linalg.norm(x)
    if n < 1e-9:
        raise ValueError("viewing direction is parallel to the up vector")
    x /= n
    y = np.cross(z, x)
    return Pose.from_rt(np.column_stack([x, y, z]), eye)
