"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that conftest prints after the run.
Run only this suite with ``pytest -m acceptance``.
"""

import time

import numpy as np
import pytest

from rigfuse import calibration as cal
from rigfuse import fusion, metrics, synth
from rigfuse.confidence import (
    ConfidenceConfig,
    DepthFrame,
    gate_mask,
    measurement_confidence,
    raw_confidence,
)
from rigfuse.geometry import Intrinsics, exp, relative_pose, rotation_geodesic_deg, translation_dist_m
from rigfuse.pipeline import Pipeline, PipelineConfig, bench, frame_metrics, run
from rigfuse.prior import PriorEstimate, RigConfig, SyntheticNoiseProvider

from _support import max_block_error, record

pytestmark = pytest.mark.acceptance


def _relative_errors(poses, truth):
    rot, trans = [], []
    for c in range(1, len(poses)):
        a, b = relative_pose(poses[0], poses[c]), relative_pose(truth[0], truth[c])
        rot.append(rotation_geodesic_deg(a, b))
        trans.append(translation_dist_m(a, b))
    return max(rot), max(trans)


def test_calibration_recovery():
    scene = synth.preset("structured", 4)
    gt = scene.camera_poses()
    frames = synth.render_frameset(scene, 0)
    rig = RigConfig.shared(scene.intrinsics, gt)
    cfg = PipelineConfig(preset="structured", workers=1, solver=cal.SolverConfig(lam=1.0, mu=0.1))
    good, times, worst = 0, [], []
    for trial in range(50):
        with Pipeline(cfg, rig, SyntheticNoiseProvider(gt, 2.0, 0.02, seed=trial)) as pipe:
            t0 = time.perf_counter()
            state, _ = pipe.process(0, frames)
            times.append(time.perf_counter() - t0)
        rot, trans = _relative_errors(state.poses, gt)
        worst.append((rot, trans))
        good += rot < 0.1 and trans < 0.005
    mean_t = float(np.mean(times))
    ok = good >= 48 and mean_t < 1.0
    record(1, "calibration recovery", ok,
           f"{good}/50 trials within 0.1 deg / 5 mm (need 48), mean {mean_t:.3f} s/frame (need < 1)")


def _ablation_errors(seed, frames_per_seq=5):
    scene = synth.preset("structured", 4, noise=synth.NoiseModel(sigma_rel=0.005), seed=seed)
    gt = scene.camera_poses()
    intr = [scene.intrinsics] * 4
    provider = SyntheticNoiseProvider(gt, 2.0, 0.0, seed=seed)
    seq = []
    for f in range(frames_per_seq):
        fs = synth.render_frameset(scene, f)
        seq.append((fs, [measurement_confidence(x) for x in fs]))
    variants = {
        "full": cal.SolverConfig(anchor_first_camera=False),
        "no-temporal": cal.SolverConfig(mu=0.0, anchor_first_camera=False),
        "no-geometric": cal.SolverConfig(lam=0.0, anchor_first_camera=False),
    }
    out = {}
    for name, cfg in variants.items():
        state, errs = None, []
        for f, (fs, confs) in enumerate(seq):
            state = cal.solve_frame(provider.provide_priors(f), state, fs, confs, intr, cfg)
            errs.append(np.mean([rotation_geodesic_deg(state.poses[c], gt[c]) for c in range(4)]))
        out[name] = float(np.mean(errs))
    return out


def test_ablation_ordering():
    runs = [_ablation_errors(seed) for seed in range(20)]
    mean = {k: float(np.mean([r[k] for r in runs])) for k in runs[0]}
    ok = mean["full"] <= mean["no-temporal"] < mean["no-geometric"]
    record(2, "ablation ordering", ok,
           "mean rotation error full {full:.3f} <= no-temporal {no-temporal:.3f} < no-geometric "
           "{no-geometric:.3f} deg".format(**mean))


def test_temporal_stability():
    scene = synth.preset("structured", 4)
    gt = scene.camera_poses()
    frames = synth.render_frameset(scene, 0)
    confs = [measurement_confidence(f) for f in frames]
    intr = [scene.intrinsics] * 4

    def stability(mu, seed):
        cfg = cal.SolverConfig(mu=mu, anchor_first_camera=False)
        provider = SyntheticNoiseProvider(gt, 1.0, 0.0, seed=seed)
        state, states = None, []
        for f in range(100):
            state = cal.solve_frame(provider.provide_priors(f), state, frames, confs, intr, cfg)
            states.append(state)
        return float(np.mean([r for r, _ in cal.rig_stability(states)]))

    with_temp = np.mean([stability(0.1, s) for s in range(10)])
    without = np.mean([stability(0.0, s) for s in range(10)])
    ratio = with_temp / without
    record(3, "temporal stability", ratio <= 0.5,
           f"stability mu=0.1 {with_temp:.4f} vs mu=0 {without:.4f} deg/frame, ratio {ratio:.3f} (need <= 0.5)")


def test_jacobian_correctness():
    rng = np.random.default_rng(2024)
    worst = {kind: max(max_block_error(kind, rng) for _ in range(100)) for kind in ("geo", "net", "temp")}
    ok = all(v < 1e-4 for v in worst.values())
    record(4, "jacobian correctness", ok,
           ", ".join(f"{k} worst block {v:.1e}" for k, v in worst.items()) + " over 100 configs each (need < 1e-4)")


def _random_depth_case(rng, cam):
    w, h = int(rng.integers(8, 51)), int(rng.integers(6, 26))
    intr = Intrinsics(float(rng.uniform(20, 60)), float(rng.uniform(20, 60)), w / 2, h / 2, w, h)
    depth = rng.uniform(0.5, 4.0, (h, w))
    depth[rng.random((h, w)) < 0.2] = 0.0
    conf = rng.uniform(0, 1, (h, w))
    pose = exp(rng.normal(0, 1, 6))
    return DepthFrame(cam, 0, depth), conf, pose, intr


def test_fusion_correctness():
    rng = np.random.default_rng(55)
    frag_err, weight_err, pos_err, sum_err, group_mismatch, largest = 0.0, 0.0, 0.0, 0.0, 0, 0
    for _ in range(40):
        n_cams = int(rng.integers(1, 5))
        cases = [_random_depth_case(rng, c) for c in range(n_cams)]
        frags = []
        for fr, conf, pose, intr in cases:
            frag = fusion.generate_fragment(fr, conf, pose, intr, 0.6)
            expect = []
            for v in range(intr.height):
                for u in range(intr.width):
                    d = fr.depth[v, u]
                    if d > 0 and conf[v, u] > 0.6:
                        pc = np.array([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d])
                        expect.append(pose.rotation @ pc + pose.translation)
            expect = np.array(expect).reshape(-1, 3)
            frag_err = max(frag_err, float(np.abs(frag.points - expect).max(initial=0.0)))
            # squash into a small volume so that groups actually form
            frags.append(fusion.PointFragment(fr.camera_id, frag.points * 0.02, frag.pixels, frag.confidence))
        largest = max(largest, sum(len(f) for f in frags))
        radius = float(rng.uniform(0.002, 0.02))
        g = fusion.group_observations(frags, radius)
        ref = fusion.group_observations_bruteforce(frags, radius)
        group_mismatch += int(not (np.array_equal(g.label, ref.label) and np.array_equal(g.seed, ref.seed)))
        vis = rng.random(len(g.label)) < 0.85
        cloud = fusion.fuse_groups(g, vis)
        row = 0
        for grp in g.groups():
            m = grp.members
            cv = [g.confidence[k] * vis[k] for k in m]
            total = sum(cv)
            if total == 0:
                continue
            w = fusion.compute_weights(g.confidence[m], vis[m])
            weight_err = max(weight_err, float(np.abs(w - np.array(cv) / total).max()))
            sum_err = max(sum_err, abs(float(w.sum()) - 1.0))
            fused = sum(cv[k] / total * g.points[m[k]] for k in range(len(m)))
            pos_err = max(pos_err, float(np.abs(cloud.points[row] - fused).max()))
            row += 1
        assert row == len(cloud)
    ok = frag_err <= 1e-12 and group_mismatch == 0 and weight_err <= 1e-12 and pos_err <= 1e-12 and sum_err <= 1e-9
    record(5, "fusion correctness", ok,
           f"fragment {frag_err:.1e}, grouping mismatches {group_mismatch}/40, weights {weight_err:.1e}, "
           f"positions {pos_err:.1e}, weight sums {sum_err:.1e} (largest {largest} points)")


def test_noise_suppression():
    fused_rms, frag_rms = [], []
    for seed in range(10):
        scene = synth.preset("complex", 4, noise=synth.NoiseModel(0.0, 0.01, 0.0), seed=seed)
        gt = scene.camera_poses()
        fs = synth.render_frameset(scene, 0)
        confs = [measurement_confidence(f) for f in fs]
        cloud = fusion.fuse_frame(fs, confs, gt, [scene.intrinsics] * 4)

        def rms(p):
            return float(np.sqrt(np.mean(synth.surface_distance(scene, p) ** 2)))

        fused_rms.append(rms(cloud.points))
        frag_rms.append(np.mean([rms(fusion.generate_fragment(f, c, p, scene.intrinsics).points)
                                 for f, c, p in zip(fs, confs, gt)]))
    a, b = float(np.mean(fused_rms)), float(np.mean(frag_rms))
    wins = sum(x < y for x, y in zip(fused_rms, frag_rms))
    record(6, "noise suppression", a < b,
           f"fused RMS {a * 1000:.2f} mm vs mean fragment RMS {b * 1000:.2f} mm, fused lower on {wins}/10 seeds")


def _brute_consistency(tracks):
    per = []
    for t in tracks:
        c = [sum(p[a] for p in t) / len(t) for a in range(3)]
        per.append(sum(sum((p[a] - c[a]) ** 2 for a in range(3)) for p in t) / len(t))
    return sum(per) / len(per)


def test_metric_fidelity():
    scene = synth.preset("structured", 1)
    fr = synth.render_frameset(scene, 0, noisy=False)[0]
    pose = scene.camera_poses()[0]
    frag = fusion.generate_fragment(fr, np.ones(fr.shape), pose, scene.intrinsics, 0.0)
    e_proj = metrics.reprojection_depth_error(frag.points, pose, scene.intrinsics, fr)

    rng = np.random.default_rng(77)
    geom_err, temp_err = 0.0, 0.0
    for _ in range(20):
        n_tracks = int(rng.integers(1, 400))
        sizes = rng.integers(1, 5, n_tracks)
        tracks = [rng.normal(0, 1, (k, 3)) for k in sizes]
        brute = _brute_consistency(tracks)
        got = metrics.geometric_consistency_error(tracks)
        packed = metrics.packed_consistency_error(np.concatenate(tracks), np.repeat(np.arange(n_tracks), sizes))
        geom_err = max(geom_err, abs(got - brute), abs(packed - brute))

        a = rng.uniform(0, 1, (int(rng.integers(1, 1000)), 3))
        b = a + rng.normal(0, 0.02, a.shape) if rng.random() < 0.5 else rng.uniform(0, 1, (int(rng.integers(1, 1000)), 3))
        radius = 0.05
        dists = [min(float(np.sum((p - q) ** 2)) for q in b) for p in a]
        kept = [d for d in dists if d <= radius * radius]
        if kept:
            temp_err = max(temp_err, abs(metrics.temporal_stability_error(a, b, radius) - sum(kept) / len(kept)))

    two_view = metrics.geometric_consistency_error([np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])])
    ok = e_proj < 1e-6 and geom_err <= 1e-12 and temp_err <= 1e-12 and two_view == 1.0
    record(7, "metric fidelity", ok,
           f"self e_proj {e_proj:.1e} m, e_geom {geom_err:.1e}, e_temp {temp_err:.1e}, two-view eps^2 {two_view!r}")


def test_linear_scaling():
    table = bench("structured", (1, 2, 4, 8), 640, 480, frames=3, warmup=1)
    lat = ", ".join(f"{r['cameras']}: {r['mean_s'] * 1000:.0f} ms" for r in table["rows"])
    r2 = table["fit"]["r2"]
    record(8, "linear scaling", r2 >= 0.95, f"R^2 {r2:.4f} (need >= 0.95) at 640x480; {lat}")


class _WorldShift:
    """Priors of another provider, expressed in a rigidly moved world frame."""

    def __init__(self, inner, world):
        self.inner, self.world = inner, world

    def provide_priors(self, frame_index, rig=None):
        return [PriorEstimate(p.camera_id, self.world.compose(p.pose), p.weight)
                for p in self.inner.provide_priors(frame_index, rig)]


def test_determinism_and_invariance(tmp_path):
    cfg = dict(preset="structured", cameras=3, noise_rel=0.005, dropout=0.01, seed=11,
               prior_sigma_rot_deg=1.0, prior_sigma_trans=0.01, frames=3)
    run(PipelineConfig(output_dir=str(tmp_path / "a"), workers=1, **cfg))
    run(PipelineConfig(output_dir=str(tmp_path / "b"), workers=2, **cfg))
    plys = sorted((tmp_path / "a").glob("*.ply"))
    identical = len(plys) == 3 and all(p.read_bytes() == (tmp_path / "b" / p.name).read_bytes() for p in plys)

    scene = synth.preset("structured", 3, noise=synth.NoiseModel(0.0, 0.005, 0.01), seed=11)
    gt = scene.camera_poses()
    rig = RigConfig.shared(scene.intrinsics, gt)
    base = SyntheticNoiseProvider(gt, 1.0, 0.01, seed=11)
    world = exp(np.array([0.4, -0.7, 1.1, 3.0, -2.0, 1.5]))
    pcfg = PipelineConfig(preset="structured", workers=1)
    metric_diff, pose_diff, cloud_diff = 0.0, 0.0, 0.0
    with Pipeline(pcfg, rig, base) as pa, Pipeline(pcfg, rig, _WorldShift(base, world)) as pb:
        prev_a = prev_b = None
        for f in range(3):
            fs = synth.render_frameset(scene, f)
            sa, ca = pa.process(f, fs)
            sb, cb = pb.process(f, fs)
            ma = frame_metrics(ca, sa, fs, rig.intrinsics, prev_a, 0.05)
            mb = frame_metrics(cb, sb, fs, rig.intrinsics, prev_b, 0.05)
            for k in ma:
                if ma[k] is not None or mb[k] is not None:
                    metric_diff = max(metric_diff, abs(ma[k] - mb[k]))
            for c in range(1, 3):
                ra, rb = relative_pose(sa.poses[0], sa.poses[c]), relative_pose(sb.poses[0], sb.poses[c])
                pose_diff = max(pose_diff, rotation_geodesic_deg(ra, rb), translation_dist_m(ra, rb))
            cloud_diff = max(cloud_diff, float(np.abs(world.apply(ca.points) - cb.points).max()))
            prev_a, prev_b = ca, cb
    ok = identical and metric_diff <= 1e-9 and pose_diff <= 1e-9 and cloud_diff <= 1e-9
    record(9, "determinism and invariance", ok,
           f"PLY bit-identical {identical}, metric diff {metric_diff:.1e}, relative pose diff {pose_diff:.1e}, "
           f"cloud diff {cloud_diff:.1e} under a world transform")


def test_confidence_contract():
    rng = np.random.default_rng(99)
    cfg = ConfidenceConfig()
    out_of_range, monotone_bad, gate_bad = 0, 0, 0
    for _ in range(50):
        h, w = int(rng.integers(3, 40)), int(rng.integers(3, 40))
        depth = rng.uniform(0.2, 6.0, (h, w)) * (rng.random((h, w)) > rng.uniform(0, 0.5))
        if rng.random() < 0.3:
            depth[: h // 2] = 2.0  # flat patch
        fr = DepthFrame(0, 0, depth)
        conf = measurement_confidence(fr, cfg)
        out_of_range += int(np.any(conf < 0) or np.any(conf > 1) or np.any(conf[depth <= 0] != 0))

        g1 = rng.exponential(1.0, 1000)
        s1 = rng.exponential(0.05, 1000)
        g2 = g1 + rng.exponential(1.0, 1000) * (rng.random(1000) < 0.7)
        s2 = s1 + rng.exponential(0.05, 1000) * (rng.random(1000) < 0.7)
        g2[rng.random(1000) < 0.05] = np.inf
        s2[rng.random(1000) < 0.05] = np.inf
        monotone_bad += int(np.sum(raw_confidence(g2, s2, cfg) > raw_confidence(g1, s1, cfg)))

        keep = {(v, u) for v in range(h) for u in range(w) if depth[v, u] > 0 and conf[v, u] > 0.6}
        mask = gate_mask(fr, conf, 0.6)
        got = {(int(v), int(u)) for v, u in zip(*np.nonzero(mask))}
        frag = fusion.generate_fragment(fr, conf, exp(np.zeros(6)), synth.default_intrinsics(w, h), 0.6)
        from_frag = {(int(v), int(u)) for u, v in frag.pixels}
        gate_bad += int(got != keep or from_frag != keep)
    ok = out_of_range == 0 and monotone_bad == 0 and gate_bad == 0
    record(10, "confidence contract", ok,
           f"maps outside [0,1] {out_of_range}/50, monotonicity violations {monotone_bad}, "
           f"gating mismatches {gate_bad}/50 at tau 0.6")
