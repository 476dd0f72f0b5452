import json

import numpy as np
import pytest

from rigfuse import io, synth
from rigfuse.fusion import FusedCloud


@pytest.fixture()
def dataset(tmp_path):
    scene = synth.preset("structured", 2, 40, 30, noise=synth.NoiseModel(0.001, 0.0, 0.0))
    root = io.export_scene(scene, tmp_path / "ds", 3)
    return scene, root


def test_depth_png_roundtrip(tmp_path):
    d = np.array([[0.0, 1.2345], [65.535, 0.001]])
    io.write_depth_png(tmp_path / "d.png", d)
    np.testing.assert_allclose(io.read_depth_png(tmp_path / "d.png"), d, atol=5e-4)
    with pytest.raises(ValueError):
        io.encode_depth(np.array([[70.0]]))


def test_export_and_load(dataset):
    scene, root = dataset
    ds = io.load_dataset(root)
    assert len(ds) == 3 and ds.rig.count == 2
    frames = ds.read_frame(1)
    ref = synth.render_frameset(scene, 1)
    for a, b in zip(frames, ref):
        assert a.frame_index == 1
        np.testing.assert_allclose(a.depth, b.depth, atol=5e-4 + 1e-12)
    assert [f[0].frame_index for f in ds.frames(1)] == [1, 2]
    gt = ds.ground_truth(0)
    assert all(x.allclose(y) for x, y in zip(gt, scene.camera_poses()))
    with pytest.raises(IndexError):
        ds.read_frame(3)


def test_missing_depth_file_is_named(dataset):
    _, root = dataset
    victim = io.depth_path(root, 1, 2)
    victim.unlink()
    with pytest.raises(io.DatasetError, match="cam1"):
        io.load_dataset(root)


def test_bad_documents(tmp_path, dataset):
    _, root = dataset
    with pytest.raises(io.DatasetError):
        io.load_dataset(tmp_path / "nowhere")
    doc = json.loads((root / io.RIG_FILE).read_text())
    doc["format"] = "other"
    (root / io.RIG_FILE).write_text(json.dumps(doc))
    with pytest.raises(io.DatasetError, match="not a"):
        io.load_dataset(root)
    (root / io.RIG_FILE).write_text("{")
    with pytest.raises(io.DatasetError, match="invalid JSON"):
        io.load_dataset(root)


def test_wrong_image_size_is_reported(dataset):
    _, root = dataset
    io.write_depth_png(io.depth_path(root, 0, 0), np.ones((5, 5)))
    ds = io.load_dataset(root)
    with pytest.raises(io.DatasetError, match="intrinsics"):
        ds.read_frame(0)


def test_ply_roundtrip_and_plyfile(tmp_path):
    plyfile = pytest.importorskip("plyfile")
    rng = np.random.default_rng(0)
    cloud = FusedCloud(rng.normal(size=(50, 3)), rng.uniform(0, 3, 50), np.ones(50, dtype=np.int64))
    path = tmp_path / "c.ply"
    io.write_ply(cloud, path)
    pts, w = io.read_ply(path)
    np.testing.assert_allclose(pts, cloud.points.astype(np.float32))
    np.testing.assert_allclose(w, cloud.weight.astype(np.float32))
    el = plyfile.PlyData.read(str(path))["vertex"]
    np.testing.assert_allclose(el["x"], pts[:, 0])
    np.testing.assert_allclose(el["weight"], w)


def test_ply_empty_and_unwritable(tmp_path):
    io.write_ply(FusedCloud.empty(), tmp_path / "e.ply")
    pts, w = io.read_ply(tmp_path / "e.ply")
    assert pts.shape == (0, 3) and w.shape == (0,)
    with pytest.raises(OSError, match="missing"):
        io.write_ply(FusedCloud.empty(), tmp_path / "missing" / "x.ply")
    (tmp_path / "bad.ply").write_bytes(b"junk")
    with pytest.raises(ValueError):
        io.read_ply(tmp_path / "bad.ply")
