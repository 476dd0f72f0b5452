"""Online extrinsic refinement.

Each frame, camera poses start from the provider's priors and are refined by
Levenberg-Marquardt on

    L_net + lam * L_geo + mu * L_temp

where ``L_geo`` is a Huber-robustified cross-view reprojection term over
sampled depth correspondences, ``L_net`` keeps each pose near its prior and
``L_temp`` near the previous frame's solution.  Pose updates are applied in the
camera frame, ``T <- T exp(xi)``, which keeps the whole iteration invariant
to the choice of world frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .confidence import DepthFrame
from .geometry import Intrinsics, Pose, exp, hat, interpolate, log, se3_right_jacobian_inv
from .prior import PriorEstimate

logger = logging.getLogger(__name__)


class InsufficientConstraintsError(RuntimeError):
    """Too few cross-view correspondences to constrain the geometric term."""


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 1.0
    mu: float = 0.1
    max_iterations: int = 10
    damping_init: float = 1e-3
    convergence_tol: float = 1e-6
    huber_delta: float = 2.0
    anchor_first_camera: bool = True
    # correspondence sampling
    samples_per_camera: int = 512
    tau: float = 0.6
    eps_abs: float = 0.005
    eps_rel: float = 0.01
    min_correspondences: int = 6
    # half-sizes (pixels) of the closest-point search and plane-fit windows
    search_radius: int = 3
    plane_radius: int = 2
    # plane fits rougher than this multiple of the median fit are dropped
    planarity_factor: float = 3.0
    # minimum |cos| between seed and target surface normals
    normal_agreement: float = math.cos(math.radians(30.0))
    # each camera's seeds are matched only in this many cameras with the
    # closest viewing direction; keeps association linear in the rig size
    max_partners: int = 3
    # data association is rebuilt at the current poses this many times
    association_rounds: int = 4
    # depth-agreement tolerance multipliers for successive rounds (last one repeats)
    gate_schedule: tuple = (4.0, 2.0, 1.0)

    def __post_init__(self) -> None:
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lam and mu must be non-negative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.damping_init > 0:
            raise ValueError("damping_init must be positive")
        if self.association_rounds < 1:
            raise ValueError("association_rounds must be >= 1")
        if not self.gate_schedule:
            raise ValueError("gate_schedule must not be empty")
        if self.max_partners < 1:
            raise ValueError("max_partners must be >= 1")

    def gate_scale(self, round_index: int) -> float:
        s = self.gate_schedule
        return float(s[min(round_index, len(s) - 1)])


# --- correspondences ------------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    camera_id: int
    col: float
    row: float
    depth: float
    confidence: float


@dataclass(frozen=True)
class Correspondence:
    world_point: np.ndarray
    observations: tuple


@dataclass(eq=False)
class CorrespondenceSet:
    """Packed correspondences; observations are stored flat and grouped by ``group``.

    The first observation of every group is its seed: a sampled pixel of one
    camera.  Each further observation is a target camera's surface near that
    seed, stored as a local plane (``plane_point``, unit ``plane_normal``, in
    the target camera frame; zero rows for seeds).  Under any poses the target
    observes the foot of the perpendicular from the seed point onto its plane.
    ``uv``, ``depth`` and ``points_cam`` hold the observed quantities at the
    poses the set was built with; ``world_points`` holds the seed points.
    """

    world_points: np.ndarray
    group: np.ndarray
    camera: np.ndarray
    uv: np.ndarray
    depth: np.ndarray
    confidence: np.ndarray
    points_cam: np.ndarray
    plane_point: np.ndarray
    plane_normal: np.ndarray
    seed_points_cam: np.ndarray

    def __len__(self) -> int:
        return len(self.world_points)

    @property
    def n_observations(self) -> int:
        return len(self.group)

    @property
    def seed_index(self) -> np.ndarray:
        return np.searchsorted(self.group, np.arange(len(self)))

    @property
    def is_seed(self) -> np.ndarray:
        m = np.zeros(self.n_observations, dtype=bool)
        m[self.seed_index] = True
        return m

    def __iter__(self):
        bounds = np.searchsorted(self.group, np.arange(len(self) + 1))
        for g in range(len(self)):
            sl = slice(bounds[g], bounds[g + 1])
            obs = tuple(
                Observation(int(c), float(uv[0]), float(uv[1]), float(d), float(w))
                for c, uv, d, w in zip(self.camera[sl], self.uv[sl], self.depth[sl], self.confidence[sl])
            )
            yield Correspondence(self.world_points[g], obs)

    def observation_points(self, poses: Sequence[Pose]) -> np.ndarray:
        """World position of every observation under ``poses``."""
        Rs, ts = _stack_rt(poses)
        return _observation_geometry(Rs, ts, self)[0]

    @classmethod
    def empty(cls) -> CorrespondenceSet:
        z3 = np.zeros((0, 3))
        zi = np.zeros(0, dtype=np.int64)
        return cls(z3, zi, zi.copy(), np.zeros((0, 2)), np.zeros(0), np.zeros(0), z3, z3, z3, z3)


def sample_grid(intr: Intrinsics, samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified grid of integer pixel positions, roughly ``samples`` of them."""
    gx = max(1, int(round(math.sqrt(samples * intr.width / intr.height))))
    gy = max(1, samples // gx)
    us = np.floor((np.arange(gx) + 0.5) * intr.width / gx).astype(np.int64)
    vs = np.floor((np.arange(gy) + 0.5) * intr.height / gy).astype(np.int64)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    return uu.ravel(), vv.ravel()


def _camera_point(intr: Intrinsics, u, v, d) -> np.ndarray:
    return np.stack([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d], axis=-1)


def _camera_point_map(frame: DepthFrame, intr: Intrinsics) -> np.ndarray:
    v, u = np.mgrid[0 : intr.height, 0 : intr.width].astype(float)
    return _camera_point(intr, u, v, frame.depth)


def _window(cu, cv, radius, shape):
    h, w = shape
    offs = np.arange(-radius, radius + 1)
    ov, ou = np.meshgrid(offs, offs, indexing="ij")
    uu = cu[:, None] + ou.ravel()[None, :]
    vv = cv[:, None] + ov.ravel()[None, :]
    inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
    return np.clip(uu, 0, w - 1), np.clip(vv, 0, h - 1), inside


def _closest_in_window(pmap, usable_map, X, cu, cv, radius):
    """Index of the usable pixel near (cu, cv) whose point in ``pmap`` is closest to ``X``."""
    uu, vv, inside = _window(cu, cv, radius, usable_map.shape)
    usable = inside & usable_map[vv, uu]
    diff = pmap[vv, uu] - X[:, None, :]
    dist = np.sum(diff * diff, axis=-1)
    dist = np.where(usable, dist, np.inf)
    best = np.argmin(dist, axis=1) if len(X) else np.zeros(0, dtype=np.int64)
    r = np.arange(len(X))
    return uu[r, best], vv[r, best], np.sqrt(dist[r, best])


def _fit_planes(cmap, usable_map, cu, cv, radius, tol):
    """Least-squares planes through usable camera points around each pixel.

    Only neighbours whose depth is within ``tol`` of the centre pixel take
    part.  Returns centroids, unit normals facing the camera and a validity mask
    (at least six supporting points and a non-degenerate spread).
    """
    uu, vv, inside = _window(cu, cv, radius, usable_map.shape)
    P = cmap[vv, uu]
    zc = cmap[cv, cu, 2]
    m = inside & usable_map[vv, uu] & (np.abs(P[..., 2] - zc[:, None]) <= tol[:, None])
    cnt = m.sum(axis=1)
    w = m.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        cen = (w[:, None, :] @ P)[:, 0] / cnt[:, None]
    D = (P - cen[:, None, :]) * w[..., None]
    cov = np.transpose(D, (0, 2, 1)) @ D
    ok = cnt >= 6
    normal = np.zeros_like(cen)
    lam = np.zeros((len(cen), 3))
    if ok.any():
        lam[ok], vecs = np.linalg.eigh(cov[ok])
        normal[ok] = vecs[:, :, 0]
    # the two in-plane directions must both be spread out
    ok &= lam[:, 1] > 1e-3 * np.maximum(lam[:, 2], 1e-300)
    flip = np.einsum("nc,nc->n", normal, cen) > 0
    normal[flip] *= -1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        rms = np.sqrt(np.maximum(lam[:, 0], 0.0) / cnt)
    return cen, normal, ok, rms


def _planar(rms, ok, factor, floor=1e-4):
    """Reject fits much rougher than is typical for this image (e.g. straddling an edge)."""
    if not ok.any():
        return ok
    return ok & (rms <= max(floor, factor * float(np.median(rms[ok]))))


def partner_cameras(poses: Sequence[Pose], count: int) -> list[np.ndarray]:
    """For each camera, the ``count`` other cameras whose optical axes are
    closest to its own (ties by centre distance, then index)."""
    n = len(poses)
    axes = np.stack([p.rotation[:, 2] for p in poses])
    centres = np.stack([p.translation for p in poses])
    out = []
    for i in range(n):
        others = np.array([j for j in range(n) if j != i], dtype=np.int64)
        if len(others) == 0:
            out.append(others)
            continue
        ang = np.arccos(np.clip(axes[others] @ axes[i], -1.0, 1.0))
        dist = np.linalg.norm(centres[others] - centres[i], axis=1)
        rank = np.lexsort((others, dist, np.round(ang, 9)))
        out.append(np.sort(others[rank[:count]]))
    return out


def build_correspondences(
    frames: Sequence[DepthFrame],
    confidences: Sequence[np.ndarray],
    poses: Sequence[Pose],
    intrinsics: Sequence[Intrinsics],
    cfg: SolverConfig = SolverConfig(),
    gate_scale: float = 1.0,
) -> CorrespondenceSet:
    """Cross-view correspondences at the given poses.

    Up to ``cfg.samples_per_camera`` grid pixels per camera with confidence
    above ``cfg.tau`` are back-projected and projected into the camera's
    partners (see :func:`partner_cameras`).  Near each in-bounds projection the confident target pixel whose
    point lies closest to the candidate is located and a plane is fitted to
    its neighbourhood; the target becomes an observation when the candidate's
    distance to that plane is within ``gate_scale * max(eps_abs, eps_rel * z)``.
    """
    n = len(frames)
    cmaps = [_camera_point_map(frames[j], intrinsics[j]) for j in range(n)]
    wmaps = [poses[j].apply(cmaps[j]) for j in range(n)]
    usable = [frames[j].valid & (confidences[j] > cfg.tau) for j in range(n)]
    partners = partner_cameras(poses, cfg.max_partners)
    seeds, seeds_cam = [], []
    obs = {k: [] for k in ("group", "camera", "conf", "pp", "pn")}
    g_next = 0
    for i in range(n):
        intr = intrinsics[i]
        du, dv = sample_grid(intr, cfg.samples_per_camera)
        keep = usable[i][dv, du]
        su, sv = du[keep], dv[keep]
        a = cmaps[i][sv, su]
        stol = np.maximum(cfg.eps_abs, cfg.eps_rel * a[:, 2])
        _, seed_n, sok, srms = _fit_planes(cmaps[i], usable[i], su, sv, cfg.plane_radius, stol)
        sok = _planar(srms, sok, cfg.planarity_factor)
        su, sv, a, seed_n = su[sok], sv[sok], a[sok], poses[i].rotation @ seed_n[sok].T
        seed_n = seed_n.T
        if len(a) == 0:
            continue
        X = poses[i].apply(a)
        matched = np.zeros(len(X), dtype=np.int64)
        cross = []
        for j in partners[i]:
            ij = intrinsics[j]
            pc = poses[j].apply_inverse(X)
            z = pc[:, 2]
            ok = z > 0
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.where(ok, ij.fx * pc[:, 0] / z + ij.cx, -1.0)
                v = np.where(ok, ij.fy * pc[:, 1] / z + ij.cy, -1.0)
            ok &= ij.in_bounds(u, v)
            idx = np.flatnonzero(ok)
            qu, qv, dist = _closest_in_window(
                wmaps[j], usable[j], X[idx],
                np.rint(u[idx]).astype(np.int64), np.rint(v[idx]).astype(np.int64), cfg.search_radius,
            )
            found = np.isfinite(dist)
            idx, qu, qv = idx[found], qu[found], qv[found]
            tol = gate_scale * np.maximum(cfg.eps_abs, cfg.eps_rel * z[idx])
            cen, nrm, ok, rms = _fit_planes(cmaps[j], usable[j], qu, qv, cfg.plane_radius, tol)
            ok = _planar(rms, ok, cfg.planarity_factor)
            h = np.einsum("nc,nc->n", pc[idx] - cen, nrm)
            cos = np.abs(np.einsum("nc,nc->n", nrm @ poses[j].rotation.T, seed_n[idx]))
            acc = ok & (np.abs(h) <= tol) & (cos >= cfg.normal_agreement)
            idx = idx[acc]
            matched[idx] += 1
            cross.append((idx, j, confidences[j][qv[acc], qu[acc]], cen[acc], nrm[acc]))
        sel = np.flatnonzero(matched > 0)
        if len(sel) == 0:
            continue
        gid = np.full(len(X), -1, dtype=np.int64)
        gid[sel] = g_next + np.arange(len(sel))
        g_next += len(sel)
        seeds.append(X[sel])
        seeds_cam.append(a[sel])
        z3 = np.zeros((len(sel), 3))
        per = [(gid[sel], np.full(len(sel), i), confidences[i][sv[sel], su[sel]], z3, z3)]
        for idx, j, qc, cen, nrm in cross:
            per.append((gid[idx], np.full(len(idx), j), qc, cen, nrm))
        for arrs in per:
            for key, arr in zip(("group", "camera", "conf", "pp", "pn"), arrs):
                obs[key].append(arr)
    if g_next == 0:
        return CorrespondenceSet.empty()
    group = np.concatenate(obs["group"])
    # stable: seeds were appended ahead of their targets
    order = np.argsort(group, kind="stable")
    corr = CorrespondenceSet(
        world_points=np.concatenate(seeds),
        group=group[order],
        camera=np.concatenate(obs["camera"])[order].astype(np.int64),
        uv=np.zeros((len(order), 2)),
        depth=np.zeros(len(order)),
        confidence=np.concatenate(obs["conf"])[order].astype(float),
        points_cam=np.zeros((len(order), 3)),
        plane_point=np.concatenate(obs["pp"])[order],
        plane_normal=np.concatenate(obs["pn"])[order],
        seed_points_cam=np.concatenate(seeds_cam),
    )
    Rs, ts = _stack_rt(poses)
    Xk = _observation_geometry(Rs, ts, corr)[0]
    y = np.einsum("kji,kj->ki", Rs[corr.camera], Xk - ts[corr.camera])
    f, c = _intrinsic_arrays(intrinsics, corr.camera)
    corr.uv = f * y[:, :2] / y[:, 2:3] + c
    corr.depth = y[:, 2]
    seed = corr.seed_index
    corr.uv[seed] = np.rint(corr.uv[seed])
    corr.points_cam = y
    return corr


# --- residuals ------------------------------------------------------------------------


def _stack_rt(poses: Sequence[Pose]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses])


def _intrinsic_arrays(intrinsics, cams):
    f = np.array([[k.fx, k.fy] for k in intrinsics])[cams]
    c = np.array([[k.cx, k.cy] for k in intrinsics])[cams]
    return f, c


def _observation_geometry(Rs, ts, corr: CorrespondenceSet):
    """World points of every observation plus intermediates for the Jacobian."""
    seed = corr.seed_index
    src = corr.camera[seed][corr.group]
    a = corr.seed_points_cam[corr.group]
    Xs = np.einsum("kij,kj->ki", Rs[src], a) + ts[src]
    R = Rs[corr.camera]
    B = np.einsum("kij,kj->ki", R, corr.plane_point) + ts[corr.camera]
    N = np.einsum("kij,kj->ki", R, corr.plane_normal)
    e = Xs - B
    h = np.einsum("kc,kc->k", N, e)
    X = Xs - h[:, None] * N
    return X, (src, a, N, e, h)


def _consensus(X, corr: CorrespondenceSet):
    W = np.bincount(corr.group, weights=corr.confidence, minlength=len(corr))
    Xbar = np.stack(
        [np.bincount(corr.group, weights=corr.confidence * X[:, a], minlength=len(corr)) for a in range(3)],
        axis=-1,
    ) / W[:, None]
    return Xbar, W


def _geo_terms(poses, intrinsics, corr):
    Rs, ts = _stack_rt(poses)
    X, geom = _observation_geometry(Rs, ts, corr)
    Xbar, W = _consensus(X, corr)
    R = Rs[corr.camera]
    tk = ts[corr.camera]
    ybar = np.einsum("kji,kj->ki", R, Xbar[corr.group] - tk)
    y = np.einsum("kji,kj->ki", R, X - tk)
    f, c = _intrinsic_arrays(intrinsics, corr.camera)
    observed = f * y[:, :2] / y[:, 2:3] + c
    seed = corr.seed_index
    observed[seed] = corr.uv[seed]
    resid = f * ybar[:, :2] / ybar[:, 2:3] + c - observed
    return resid, (Rs, ts, X, geom, W, ybar, y, f)


def huber_weights(r2: np.ndarray, delta: float) -> np.ndarray:
    """IRLS weights for ``(K, 2)`` residual vectors under a Huber loss on their norm."""
    s = np.linalg.norm(r2, axis=-1)
    with np.errstate(divide="ignore"):
        return np.where(s <= delta, 1.0, delta / s)


def huber_cost(r2: np.ndarray, delta: float) -> float:
    s = np.linalg.norm(r2, axis=-1)
    return float(np.sum(np.where(s <= delta, s * s, 2.0 * delta * s - delta * delta)))


def residual_geo(poses, intrinsics, corr: CorrespondenceSet, huber_delta: float | None = None) -> np.ndarray:
    """Stacked pixel residuals ``pi(T_c^-1 Xbar) - observed`` (2 per observation).

    With ``huber_delta`` the residuals are rescaled so their squared norm
    equals the Huber cost.
    """
    if len(corr) == 0:
        return np.zeros(0)
    r, _ = _geo_terms(poses, intrinsics, corr)
    if huber_delta is not None:
        s = np.linalg.norm(r, axis=-1)
        rho = np.where(s <= huber_delta, s * s, 2.0 * huber_delta * s - huber_delta**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(s > 0, np.sqrt(rho) / s, 1.0)
        r = r * scale[:, None]
    return r.ravel()


def _dpi(y, f):
    z = y[:, 2]
    J = np.zeros((len(y), 2, 3))
    J[:, 0, 0] = f[:, 0] / z
    J[:, 0, 2] = -f[:, 0] * y[:, 0] / z**2
    J[:, 1, 1] = f[:, 1] / z
    J[:, 1, 2] = -f[:, 1] * y[:, 1] / z**2
    return J


def _point_jac(R, p):
    """d(R p + t) / d xi under ``T <- T exp(xi)``: ``R [-[p]x, I]``."""
    return np.concatenate([-R @ hat(p), R], axis=-1)


def jacobian_geo(poses, intrinsics, corr: CorrespondenceSet) -> np.ndarray:
    """d residual_geo / d xi for camera-frame twists; shape ``(2K, 6N)``."""
    n = len(poses)
    K = corr.n_observations
    if K == 0:
        return np.zeros((0, 6 * n))
    _, (Rs, ts, X, (src, a, N, e, h), W, ybar, y, f) = _geo_terms(poses, intrinsics, corr)
    seed = corr.is_seed
    cam = corr.camera
    eye = np.eye(3)
    ks = np.flatnonzero(seed)
    kt = np.flatnonzero(~seed)
    # blocks of dX_k / d xi_c as (observation, camera, 3x6) triples
    A = _point_jac(Rs[src], a)
    NN = N[kt, :, None] * N[kt, None, :]
    Rj = Rs[cam[kt]]
    dB = NN @ _point_jac(Rj, corr.plane_point[kt])
    dB[:, :, :3] += (h[kt, None, None] * eye + N[kt, :, None] * e[kt, None, :]) @ (Rj @ hat(corr.plane_normal[kt]))
    trip_k = np.concatenate([ks, kt, kt])
    trip_c = np.concatenate([src[ks], src[kt], cam[kt]])
    trip_B = np.concatenate([A[ks], (eye - NN) @ A[kt], dB])
    by_obs = np.argsort(trip_k, kind="stable")
    trip_k, trip_c, trip_B = trip_k[by_obs], trip_c[by_obs], trip_B[by_obs]

    # every observation sees every triple of its group through the consensus
    G = len(corr)
    trip_g = corr.group[trip_k]
    ntrip = np.bincount(trip_g, minlength=G)
    tstart = np.cumsum(ntrip) - ntrip
    reps = ntrip[corr.group]
    pair_k = np.repeat(np.arange(K), reps)
    pair_t = tstart[corr.group][pair_k] + np.arange(len(pair_k)) - np.repeat(np.cumsum(reps) - reps, reps)
    RT = np.transpose(Rs[cam], (0, 2, 1))
    Pbar = _dpi(ybar, f)
    Mbar = Pbar @ RT
    wt = (corr.confidence[trip_k] / W[trip_g])[:, None, None]
    contrib = [Mbar[pair_k] @ (wt[pair_t] * trip_B[pair_t])]
    index = [pair_k * n + trip_c[pair_t]]

    def direct(p):
        return np.concatenate([hat(p), np.broadcast_to(-eye, (len(p), 3, 3))], axis=-1)

    contrib.append(Pbar @ direct(ybar))
    index.append(np.arange(K) * n + cam)
    # minus the observation's own Jacobian (targets only)
    tt = np.flatnonzero(~seed[trip_k])
    P = _dpi(y, f)
    contrib.append(-((P @ RT)[trip_k[tt]] @ trip_B[tt]))
    index.append(trip_k[tt] * n + trip_c[tt])
    contrib.append(-(P[kt] @ direct(y[kt])))
    index.append(kt * n + cam[kt])

    vals = np.concatenate(contrib).reshape(-1, 12)
    lin = np.concatenate(index)
    flat = (lin[:, None] * 12 + np.arange(12)).ravel()
    J = np.bincount(flat, weights=vals.ravel(), minlength=K * n * 12).reshape(K, n, 2, 6)
    return J.transpose(0, 2, 1, 3).reshape(2 * K, 6 * n)


def _prior_poses(priors) -> list[Pose]:
    return [p.pose if isinstance(p, PriorEstimate) else p for p in priors]


def _prior_weights(priors) -> np.ndarray:
    return np.array([p.weight if isinstance(p, PriorEstimate) else 1.0 for p in priors])


def residual_net(poses, priors) -> np.ndarray:
    """Per camera ``weight * log(prior^-1 pose)`` (6 per camera)."""
    ref = _prior_poses(priors)
    w = _prior_weights(priors)
    return np.concatenate([wi * log(r.inverse().compose(p)) for p, r, wi in zip(poses, ref, w)])


def jacobian_net(poses, priors) -> np.ndarray:
    ref = _prior_poses(priors)
    w = _prior_weights(priors)
    n = len(poses)
    J = np.zeros((6 * n, 6 * n))
    for c, (p, r, wi) in enumerate(zip(poses, ref, w)):
        e = log(r.inverse().compose(p))
        J[6 * c : 6 * c + 6, 6 * c : 6 * c + 6] = wi * se3_right_jacobian_inv(e)
    return J


def residual_temp(poses, previous_poses) -> np.ndarray:
    """Per camera ``log(previous^-1 current)``; empty without a previous frame."""
    if previous_poses is None:
        return np.zeros(0)
    return residual_net(poses, previous_poses)


def jacobian_temp(poses, previous_poses) -> np.ndarray:
    if previous_poses is None:
        return np.zeros((0, 6 * len(poses)))
    return jacobian_net(poses, previous_poses)


def jacobians(kind: str, poses, *args) -> np.ndarray:
    """Analytic Jacobian of residual ``kind`` ('geo', 'net', 'temp') w.r.t. camera twists."""
    if kind == "geo":
        return jacobian_geo(poses, *args)
    if kind == "net":
        return jacobian_net(poses, *args)
    if kind == "temp":
        return jacobian_temp(poses, *args)
    raise ValueError(f"unknown residual kind {kind!r}")


# --- solver ---------------------------------------------------------------------------


@dataclass
class CalibrationState:
    poses: tuple
    previous_poses: tuple | None = None
    cost: float = 0.0
    initial_cost: float = 0.0
    iterations: int = 0
    cost_terms: dict = field(default_factory=lambda: {"geo": 0.0, "net": 0.0, "temp": 0.0})
    degraded: bool = False
    correspondences: CorrespondenceSet | None = None
    rounds: int = 0

    @property
    def camera_count(self) -> int:
        return len(self.poses)


class _Objective:
    def __init__(self, priors, previous, intrinsics, corr, cfg: SolverConfig):
        self.priors = priors
        self.previous = previous
        self.intrinsics = intrinsics
        self.corr = corr
        self.cfg = cfg
        self.use_geo = cfg.lam > 0 and corr is not None and len(corr) > 0
        self.use_temp = cfg.mu > 0 and previous is not None

    def terms(self, poses) -> dict:
        geo = 0.0
        if self.use_geo:
            r, _ = _geo_terms(poses, self.intrinsics, self.corr)
            geo = huber_cost(r, self.cfg.huber_delta)
        net = float(np.sum(residual_net(poses, self.priors) ** 2))
        temp = float(np.sum(residual_temp(poses, self.previous) ** 2)) if self.previous is not None else 0.0
        return {"geo": geo, "net": net, "temp": temp}

    def total(self, terms: dict) -> float:
        return terms["net"] + self.cfg.lam * terms["geo"] + (self.cfg.mu * terms["temp"] if self.use_temp else 0.0)

    def linearize(self, poses):
        rs, Js = [], []
        if self.use_geo:
            r2, _ = _geo_terms(poses, self.intrinsics, self.corr)
            w = np.sqrt(self.cfg.lam * huber_weights(r2, self.cfg.huber_delta))
            rs.append((r2 * w[:, None]).ravel())
            Js.append(jacobian_geo(poses, self.intrinsics, self.corr) * np.repeat(w, 2)[:, None])
        rs.append(residual_net(poses, self.priors))
        Js.append(jacobian_net(poses, self.priors))
        if self.use_temp:
            s = math.sqrt(self.cfg.mu)
            rs.append(s * residual_temp(poses, self.previous))
            Js.append(s * jacobian_temp(poses, self.previous))
        return np.concatenate(rs), np.vstack(Js)


def _retract(poses, delta, free) -> list[Pose]:
    out = list(poses)
    for k, c in enumerate(free):
        out[c] = poses[c].compose(exp(delta[6 * k : 6 * k + 6]))
    return out


def _levenberg_marquardt(obj: _Objective, poses, free, cfg: SolverConfig):
    terms = obj.terms(poses)
    cost = obj.total(terms)
    damping = cfg.damping_init
    it = 0
    cols = np.concatenate([np.arange(6 * c, 6 * c + 6) for c in free]) if free else np.zeros(0, dtype=int)
    while it < cfg.max_iterations and cost > 0 and len(cols):
        r, J = obj.linearize(poses)
        J = J[:, cols]
        H = J.T @ J
        g = J.T @ r
        diag = np.diag(H).copy()
        diag = np.maximum(diag, 1e-12 * max(1.0, diag.max()))
        accepted = False
        while it < cfg.max_iterations:
            it += 1
            try:
                delta = -np.linalg.solve(H + damping * np.diag(diag), g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            cand = _retract(poses, delta, free)
            cand_terms = obj.terms(cand)
            cand_cost = obj.total(cand_terms)
            if cand_cost < cost:
                rel = (cost - cand_cost) / cost
                poses, terms, cost = cand, cand_terms, cand_cost
                damping = max(damping / 10.0, 1e-12)
                accepted = True
                break
            damping *= 10.0
        if not accepted or rel < cfg.convergence_tol:
            break
    return poses, terms, cost, it


def _fallback(priors, previous, cfg: SolverConfig) -> list[Pose]:
    ref = _prior_poses(priors)
    if previous is None or cfg.mu == 0:
        return ref
    s = cfg.mu / (1.0 + cfg.mu)
    return [interpolate(p, q, s) for p, q in zip(ref, previous)]


def solve_frame(
    priors: Sequence[PriorEstimate],
    previous_state: CalibrationState | None,
    frames: Sequence[DepthFrame],
    confidences: Sequence[np.ndarray],
    intrinsics: Sequence[Intrinsics],
    cfg: SolverConfig = SolverConfig(),
) -> CalibrationState:
    """Refine all camera poses of one frame."""
    n = len(frames)
    if len(priors) != n or len(confidences) != n or len(intrinsics) != n:
        raise ValueError("priors, frames, confidences and intrinsics must have one entry per camera")
    start = _prior_poses(priors)
    previous = tuple(previous_state.poses) if previous_state is not None else None
    free = list(range(1, n)) if cfg.anchor_first_camera else list(range(n))

    use_geo = cfg.lam > 0 and n > 1
    poses = list(start)
    corr = None
    total_it = 0
    rounds = 0
    initial_cost = None
    for rnd in range(cfg.association_rounds if use_geo else 1):
        if use_geo:
            corr = build_correspondences(frames, confidences, poses, intrinsics, cfg, cfg.gate_scale(rnd))
            if len(corr) < cfg.min_correspondences:
                if rnd == 0:
                    logger.info("frame degraded: %d correspondences", len(corr))
                    fb = _fallback(priors, previous, cfg)
                    obj = _Objective(priors, previous, intrinsics, None, cfg)
                    terms = obj.terms(fb)
                    c = obj.total(terms)
                    return CalibrationState(tuple(fb), previous, c, c, 0, terms, True, corr, 0)
                break
        obj = _Objective(priors, previous, intrinsics, corr, cfg)
        if initial_cost is None:
            initial_cost = obj.total(obj.terms(start))
        before = poses
        poses, terms, cost, it = _levenberg_marquardt(obj, poses, free, cfg)
        total_it += it
        rounds += 1
        moved = max(
            (np.linalg.norm(log(b.inverse().compose(a))) for a, b in zip(poses, before)), default=0.0
        )
        if moved < 1e-10 and rnd >= len(cfg.gate_schedule) - 1:
            break

    obj = _Objective(priors, previous, intrinsics, corr, cfg)
    terms = obj.terms(poses)
    cost = obj.total(terms)
    # the objective actually solved is the one with the final data association
    start_cost = obj.total(obj.terms(start))
    if cost > start_cost:
        poses, terms, cost = start, obj.terms(start), start_cost
    return CalibrationState(tuple(poses), previous, cost, start_cost, total_it, terms, False, corr, rounds)


def stability_metric(pose_sequence: Sequence[Pose]) -> tuple[float, float]:
    """Mean frame-to-frame twist norm: ``(rotation degrees, translation-part meters)``."""
    if len(pose_sequence) < 2:
        return 0.0, 0.0
    rot, trans = [], []
    for a, b in zip(pose_sequence[:-1], pose_sequence[1:]):
        xi = log(a.inverse().compose(b))
        rot.append(np.linalg.norm(xi[:3]))
        trans.append(np.linalg.norm(xi[3:]))
    return math.degrees(float(np.mean(rot))), float(np.mean(trans))


def rig_stability(states: Sequence[CalibrationState]) -> list[tuple[float, float]]:
    """:func:`stability_metric` per camera over a sequence of solved frames."""
    if not states:
        return []
    n = states[0].camera_count
    return [stability_metric([s.poses[c] for s in states]) for c in range(n)]
