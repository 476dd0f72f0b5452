"""On-disk datasets (JSON rig document + 16-bit millimetre depth PNGs) and PLY output.

Layout::

    <root>/rig.json
    <root>/cam<id>/depth_000000.png   16-bit, millimetres, 0 = invalid
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .confidence import DepthFrame
from .geometry import Intrinsics, Pose
from .prior import FilePriorProvider, RigConfig

RIG_FILE = "rig.json"
FORMAT_TAG = "rigfuse-dataset"
DEPTH_SCALE = 0.001  # metres per stored unit


class DatasetError(ValueError):
    """Malformed or inconsistent dataset on disk."""


def depth_path(root, camera_id: int, frame_index: int) -> Path:
    return Path(root) / f"cam{camera_id}" / f"depth_{frame_index:06d}.png"


def _pose_to_json(p: Pose) -> dict:
    return {"quaternion": [float(x) for x in p.quat], "translation": [float(x) for x in p.translation]}


def _pose_from_json(d: dict, where: str) -> Pose:
    try:
        return Pose(np.asarray(d["quaternion"], dtype=float), np.asarray(d["translation"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: bad pose entry ({exc})") from None


def encode_depth(depth: np.ndarray) -> np.ndarray:
    mm = np.rint(np.asarray(depth, dtype=float) / DEPTH_SCALE)
    if mm.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("depth exceeds the 16-bit millimetre range (65.535 m)")
    return mm.astype(np.uint16)


def write_depth_png(path, depth: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(encode_depth(depth)).save(path)


def read_depth_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except FileNotFoundError:
        raise DatasetError(f"missing depth image {path}") from None
    except OSError as exc:
        raise DatasetError(f"unreadable depth image {path}: {exc}") from None
    if arr.ndim != 2 or arr.dtype != np.uint16:
        raise DatasetError(f"{path}: expected a single-channel 16-bit image, got {arr.dtype} {arr.shape}")
    return arr.astype(float) * DEPTH_SCALE


# --- dataset --------------------------------------------------------------------------


class Dataset:
    """A loaded rig document; frames are read from disk only when iterated."""

    def __init__(self, root, rig: RigConfig, frame_count: int, fps: float,
                 frame_priors: dict, ground_truth: dict):
        self.root = Path(root)
        self.rig = rig
        self.frame_count = frame_count
        self.fps = fps
        self.frame_priors = frame_priors
        self.ground_truth_poses = ground_truth

    def __len__(self) -> int:
        return self.frame_count

    def read_frame(self, frame_index: int) -> list[DepthFrame]:
        if not 0 <= frame_index < self.frame_count:
            raise IndexError(f"frame {frame_index} out of range [0, {self.frame_count})")
        out = []
        for cam, intr in zip(self.rig.camera_ids, self.rig.intrinsics):
            path = depth_path(self.root, cam, frame_index)
            d = read_depth_png(path)
            if d.shape != intr.shape:
                raise DatasetError(f"{path}: image is {d.shape[1]}x{d.shape[0]}, intrinsics say {intr.width}x{intr.height}")
            out.append(DepthFrame(cam, frame_index, d, frame_index / self.fps))
        return out

    def frames(self, start: int = 0, stop: int | None = None) -> Iterator[list[DepthFrame]]:
        stop = self.frame_count if stop is None else min(stop, self.frame_count)
        for f in range(start, stop):
            yield self.read_frame(f)

    __iter__ = frames

    def prior_provider(self) -> FilePriorProvider:
        return FilePriorProvider(self.frame_priors)

    def ground_truth(self, frame_index: int) -> list[Pose] | None:
        if not self.ground_truth_poses:
            return None
        return [self.ground_truth_poses[c][frame_index] for c in self.rig.camera_ids]


def load_dataset(path) -> Dataset:
    """Parse and validate a dataset directory; depth images are not read yet."""
    root = Path(path)
    doc_path = root / RIG_FILE
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    if not doc_path.is_file():
        raise DatasetError(f"{doc_path} not found")
    try:
        doc = json.loads(doc_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{doc_path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_TAG:
        raise DatasetError(f"{doc_path}: not a {FORMAT_TAG} document")
    try:
        n_frames = int(doc["frame_count"])
        cams = list(doc["cameras"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{doc_path}: missing or bad field ({exc})") from None
    if not cams:
        raise DatasetError(f"{doc_path}: no cameras")
    ids, intrs, priors, frame_priors, gt = [], [], [], {}, {}
    for k, c in enumerate(cams):
        where = f"{doc_path} camera #{k}"
        try:
            cid = int(c["id"])
            intr = Intrinsics(**c["intrinsics"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: bad camera entry ({exc})") from None
        ids.append(cid)
        intrs.append(intr)
        priors.append(_pose_from_json(c.get("prior", {}), where))
        for key, dest in (("frame_priors", frame_priors), ("ground_truth", gt)):
            if key in c:
                seq = [_pose_from_json(p, f"{where} {key}") for p in c[key]]
                if len(seq) != n_frames:
                    raise DatasetError(f"{where}: {key} has {len(seq)} entries, expected {n_frames}")
                dest[cid] = seq
        cam_dir = root / f"cam{cid}"
        found = sorted(cam_dir.glob("depth_*.png")) if cam_dir.is_dir() else []
        if len(found) != n_frames:
            raise DatasetError(f"{cam_dir}: found {len(found)} depth images, expected {n_frames}")
        for f in range(n_frames):
            if not depth_path(root, cid, f).is_file():
                raise DatasetError(f"missing depth image {depth_path(root, cid, f)}")
    try:
        rig = RigConfig(tuple(intrs), tuple(priors), tuple(ids))
    except ValueError as exc:
        raise DatasetError(f"{doc_path}: {exc}") from None
    return Dataset(root, rig, n_frames, float(doc.get("fps", 30.0)), frame_priors, gt)


def write_dataset(path, intrinsics: Sequence[Intrinsics], priors: Sequence[Pose],
                  frames: Iterator[Sequence[DepthFrame]], *, camera_ids=None, ground_truth=None,
                  frame_priors=None, fps: float = 30.0) -> Path:
    """Write frame-sets (consumed lazily) plus the rig document.

    ``ground_truth`` / ``frame_priors`` are optional callables
    ``frame_index -> list of poses``.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    ids = list(range(len(intrinsics))) if camera_ids is None else list(camera_ids)
    gt_seq = {c: [] for c in ids}
    pr_seq = {c: [] for c in ids}
    n = 0
    for fs in frames:
        for cid, fr in zip(ids, fs):
            write_depth_png(depth_path(root, cid, n), fr.depth)
        if ground_truth is not None:
            for cid, p in zip(ids, ground_truth(n)):
                gt_seq[cid].append(_pose_to_json(p))
        if frame_priors is not None:
            for cid, p in zip(ids, frame_priors(n)):
                pr_seq[cid].append(_pose_to_json(p))
        n += 1
    cams = []
    for cid, intr, prior in zip(ids, intrinsics, priors):
        entry = {"id": cid, "intrinsics": intr.to_dict(), "prior": _pose_to_json(prior)}
        if ground_truth is not None:
            entry["ground_truth"] = gt_seq[cid]
        if frame_priors is not None:
            entry["frame_priors"] = pr_seq[cid]
        cams.append(entry)
    doc = {"format": FORMAT_TAG, "version": 1, "frame_count": n, "fps": fps,
           "depth_unit_m": DEPTH_SCALE, "cameras": cams}
    (root / RIG_FILE).write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return root


def export_scene(scene, path, n_frames: int, noisy: bool = True, priors=None) -> Path:
    """Render ``n_frames`` of a synthetic scene into a dataset directory."""
    from . import synth

    gt = scene.camera_poses()
    return write_dataset(
        path,
        [scene.intrinsics] * scene.camera_count,
        list(priors) if priors is not None else gt,
        synth.iter_frames(scene, n_frames, noisy=noisy),
        ground_truth=lambda f: gt,
        fps=scene.fps,
    )


# --- PLY ------------------------------------------------------------------------------

_PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("weight", "<f4")])


def ply_header(count: int) -> bytes:
    return (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {count}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property float weight\n"
        "end_header\n"
    ).encode("ascii")


def write_ply(cloud, path) -> None:
    """Binary little-endian PLY with float x, y, z and weight per vertex."""
    pts = np.asarray(cloud.points, dtype=float).reshape(-1, 3)
    weight = np.asarray(getattr(cloud, "weight", np.ones(len(pts))), dtype=float).reshape(-1)
    rec = np.empty(len(pts), dtype=_PLY_VERTEX)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    rec["weight"] = weight
    try:
        with open(path, "wb") as fh:
            fh.write(ply_header(len(pts)))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write PLY file {os.fspath(path)}: {exc.strerror}") from exc


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back a file produced by :func:`write_ply`; returns ``(points, weight)``."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: unsupported PLY format")
    n = next(int(h.split()[2]) for h in header if h.startswith("element vertex"))
    body = data[end + len(b"end_header\n") :]
    if len(body) != n * _PLY_VERTEX.itemsize:
        raise ValueError(f"{path}: payload size {len(body)} does not match {n} vertices")
    rec = np.frombuffer(body, dtype=_PLY_VERTEX)
    pts = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(float)
    return pts, rec["weight"].astype(float)

