import numpy as np
import pytest

from rigfuse import synth
from rigfuse.geometry import Intrinsics, Pose, back_project, look_at, pixel_grid, project


def _fronto():
    intr = Intrinsics(80, 80, 40, 30, 80, 60)
    plane = synth.Plane([0, 0, 2.0], [0, 0, -1], size=(50.0, 50.0))
    cam = Pose.identity()
    rig = synth.RigSpec(1, intr)
    return synth.SceneSpec((plane,), rig), cam, intr


def test_fronto_parallel_plane_depth_is_exact():
    scene, cam, intr = _fronto()
    depth, _ = synth.cast(scene, cam)
    assert np.all(depth == 2.0)


def test_sphere_on_axis_centre_depth():
    intr = Intrinsics(100, 100, 50, 50, 101, 101)
    rig = synth.RigSpec(1, intr)
    scene = synth.SceneSpec((synth.Sphere([0, 0, 3.0], 0.5),), rig)
    depth, _ = synth.cast(scene, Pose.identity())
    assert depth[50, 50] == pytest.approx(2.5, abs=1e-12)
    assert depth[0, 0] == 0.0


def test_hit_points_back_project_from_depth():
    scene = synth.preset("structured", 2)
    pose = scene.camera_poses()[1]
    depth, pts = synth.cast(scene, pose)
    u, v = pixel_grid(scene.intrinsics)
    ok = depth > 0
    np.testing.assert_allclose(back_project(pose, scene.intrinsics, u[ok], v[ok], depth[ok]), pts[ok], atol=1e-9)
    assert np.all(synth.surface_distance(scene, pts[ok]) < 1e-9)


def test_cross_view_consistency():
    scene = synth.preset("structured", 2)
    poses = scene.camera_poses()
    intr = scene.intrinsics
    (f0, pts0), (f1, _) = synth.render_depth(scene, 0), synth.render_depth(scene, 1)
    world = pts0[f0.valid]
    pr = project(poses[1], intr, world)
    inside = pr.in_front & intr.in_bounds(pr.col, pr.row)
    world, z = world[inside], pr.depth[inside]
    # exact ray from the second camera towards each point
    pc = poses[1].apply_inverse(world)
    dirs = (pc / pc[:, 2:3]) @ poses[1].rotation.T
    hit = np.full(len(world), np.inf)
    for prim in scene.primitives:
        np.minimum(hit, prim.intersect(poses[1].translation, dirs, np.zeros(3)), out=hit)
    mutual = np.abs(hit - z) < 1e-9
    assert mutual.mean() > 0.5
    ui = np.rint(pr.col[inside][mutual]).astype(int)
    vi = np.rint(pr.row[inside][mutual]).astype(int)
    d1 = f1.depth[vi, ui]
    tol = np.maximum(0.005, 0.01 * z[mutual])
    # nearest-pixel rounding only breaks agreement at depth edges
    assert np.mean(np.abs(d1 - z[mutual]) <= tol) > 0.97


def test_noise_is_seeded_and_shaped():
    scene = synth.preset("structured", 1, noise=synth.NoiseModel(0.0, 0.01, 0.1), seed=5)
    a = synth.render_depth(scene, 0, 3)[0].depth
    b = synth.render_depth(scene, 0, 3)[0].depth
    c = synth.render_depth(scene, 0, 4)[0].depth
    clean = synth.render_depth(scene, 0, 3, noisy=False)[0].depth
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    both = (a > 0) & (clean > 0)
    rel = (a[both] - clean[both]) / clean[both]
    assert np.std(rel) == pytest.approx(0.01, rel=0.1)
    dropped = (clean > 0) & (a == 0)
    assert dropped.sum() / (clean > 0).sum() == pytest.approx(0.1, abs=0.02)


def test_dynamic_preset_moves_one_box():
    scene = synth.preset("dynamic", 1)
    a = synth.render_depth(scene, 0, 0, noisy=False)[0].depth
    b = synth.render_depth(scene, 0, 30, noisy=False)[0].depth
    assert not np.array_equal(a, b)
    static = synth.preset("structured", 1)
    assert np.array_equal(synth.render_depth(static, 0, 0)[0].depth, synth.render_depth(static, 0, 30)[0].depth)


@pytest.mark.parametrize("name", synth.PRESET_NAMES)
@pytest.mark.parametrize("n", synth.CAMERA_COUNTS)
def test_presets_render_valid_frames(name, n):
    scene = synth.preset(name, n, 64, 48)
    frames = synth.render_frameset(scene, 0)
    assert len(frames) == n
    for k, f in enumerate(frames):
        assert f.camera_id == k and f.shape == (48, 64)
        assert f.valid.mean() > 0.5


def test_iter_frames_is_lazy_and_indexed():
    scene = synth.preset("structured", 2, 32, 24)
    it = synth.iter_frames(scene, 3, start=5)
    first = next(it)
    assert first[0].frame_index == 5
    assert [fs[0].frame_index for fs in it] == [6, 7]


def test_look_at_axes():
    pose = look_at([3.0, 0.0, 1.0], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(pose.rotation[:, 2], [-1, 0, 0], atol=1e-12)
    # image "down" points toward world -z
    assert pose.rotation[2, 1] < 0


def test_validation():
    with pytest.raises(ValueError):
        synth.preset("nope")
    with pytest.raises(ValueError):
        synth.NoiseModel(dropout=1.0)
    with pytest.raises(ValueError):
        synth.RigSpec(0, synth.default_intrinsics())
