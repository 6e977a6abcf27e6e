import numpy as np
import pytest

from featsplat.codec import Codec, FeatureImage
from featsplat.losses import LossWeights, ViewTargets, view_loss
from featsplat.raster import render_view
from featsplat.scene import CameraModel, logit
from featsplat.sh import eval_sh
from featsplat.synthetic import orbit_cameras, plane_scene, render_frames, sphere_scene
from featsplat.trainer import (
    Frame, LossTrace, TrainConfig, TrainingDataset, init_scene, prune, train, train_phase1, train_phase2,
)

NON_SEMANTIC = ("means", "log_scales", "quats", "opacity_logits", "sh", "aff_logits")


def small_dataset(n_frames=4, size=32, embeddings=None, seed=0):
    gt = sphere_scene(60, seed=seed)
    frames = render_frames(gt, orbit_cameras(n_frames, 3.5, size, size, fov_deg=45), embeddings)
    return gt, TrainingDataset(frames, gt.means.copy(), np.full((len(gt), 3), 0.5))


def top_down_frames(scene, n=2, size=24, aff=None, feats=None):
    frames = []
    for i in range(n):
        cam = CameraModel.look_at([0.05 * i, 0.03, 1.2], [0.05 * i, 0, 0], up=(0, 1, 0), width=size, height=size,
                                  fov_deg=50)
        b = render_view(scene, cam)
        a = b.affordance if aff is None else np.full((size, size, 1), aff)
        frames.append(Frame(cam, b.rgb.copy(), feats, a, f"f{i}"))
    return frames


def test_single_seed_point_fallback_scale():
    ds = TrainingDataset([Frame(CameraModel(1, 1, 0, 0, 1, 1), np.zeros((1, 1, 3)))] * 2, [[0.3, 0.1, 2]],
                         [[0.5, 0.5, 0.5]])
    s = init_scene(ds)
    assert len(s) == 1
    np.testing.assert_allclose(np.exp(s.log_scales), 0.01, rtol=1e-12)


def test_tetrahedron_scale_is_edge_length():
    pts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    edge = np.sqrt(8.0)
    ds = TrainingDataset([Frame(CameraModel(1, 1, 0, 0, 1, 1), np.zeros((1, 1, 3)))] * 2, pts, np.full((4, 3), 0.5))
    s = init_scene(ds)
    np.testing.assert_allclose(s.log_scales, np.log(edge), rtol=1e-12)
    np.testing.assert_allclose(s.quats, np.tile([1, 0, 0, 0], (4, 1)))


def test_seed_color_is_reproduced_from_any_view(rng):
    ds = TrainingDataset([Frame(CameraModel(1, 1, 0, 0, 1, 1), np.zeros((1, 1, 3)))] * 2, [[0, 0, 0]], [[1, 0, 0]])
    s = init_scene(ds, sh_degree=2)
    for d in rng.normal(size=(5, 3)):
        np.testing.assert_allclose(eval_sh(s.sh[0], d / np.linalg.norm(d)), [1, 0, 0], atol=1e-12)


def test_initial_opacity_and_affordance_in_open_interval():
    _, ds = small_dataset()
    s = init_scene(ds)
    assert np.all((s.opacities > 0) & (s.opacities < 1))
    assert np.all((s.affordances > 0) & (s.affordances < 1))


def test_dataset_validation():
    cam = CameraModel(1, 1, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        TrainingDataset([Frame(cam, np.zeros((1, 1, 3)))], np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        TrainingDataset([Frame(cam, np.zeros((1, 1, 3)), affordance=np.full((1, 1, 1), 1.5))] * 2,
                        np.zeros((1, 3)), np.zeros((1, 3)))
    f1 = Frame(cam, np.zeros((1, 1, 3)), FeatureImage(np.zeros((1, 1, 4))))
    f2 = Frame(cam, np.zeros((1, 1, 3)), FeatureImage(np.zeros((1, 1, 5))))
    with pytest.raises(ValueError):
        TrainingDataset([f1, f2], np.zeros((1, 3)), np.zeros((1, 3)))


def test_config_validation_and_file_round_trip(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(phase1_iters=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_sh=0)
    cfg = TrainConfig(phase1_iters=7, lr_mean=3e-4, simultaneous_semantic=True, seed=5)
    (tmp_path / "c.cfg").write_text("# comment\n" + cfg.to_text())
    assert TrainConfig.from_file(tmp_path / "c.cfg") == cfg
    (tmp_path / "bad.cfg").write_text("no_such_key = 3\n")
    with pytest.raises(ValueError, match="bad.cfg:1"):
        TrainConfig.from_file(tmp_path / "bad.cfg")


def test_learning_rate_of_means_scales_with_extent():
    assert TrainConfig().learning_rates(2.0)["means"] == pytest.approx(3.2e-4)


def test_scene_at_target_is_stationary():
    scene = plane_scene(12)
    frames = top_down_frames(scene)
    ds = TrainingDataset(frames, scene.means, np.full((len(scene), 3), 0.5))
    before = scene.copy()
    after, trace = train_phase1(scene.copy(), ds, TrainConfig(phase1_iters=10, prune_every=0))
    assert np.all(trace.totals() == 0)
    for name in NON_SEMANTIC:
        np.testing.assert_allclose(getattr(after, name), getattr(before, name), rtol=0, atol=1e-12)


def test_affordance_only_target_is_fitted():
    scene = plane_scene(12)
    scene.aff_logits[:] = logit(0.1)
    frames = top_down_frames(scene, aff=0.7)
    ds = TrainingDataset(frames, scene.means, np.full((len(scene), 3), 0.5))
    out, _ = train_phase1(scene, ds, TrainConfig(phase1_iters=150, prune_every=0))
    m = render_view(out, frames[0].camera).affordance.mean()
    assert 0.65 <= m <= 0.75


def test_phase2_constant_target_and_frozen_geometry():
    scene = plane_scene(12)
    v = np.array([0.2, 0.7, 0.4])
    frames = top_down_frames(scene, feats=FeatureImage(np.tile(v, (12, 12, 1))))
    ds = TrainingDataset(frames, scene.means, np.full((len(scene), 3), 0.5))
    scene.latents[:] = [0.6, 0.1, 0.1]
    before = scene.copy()
    out, trace = train_phase2(scene.copy(), ds, Codec.identity(3), TrainConfig(phase2_iters=300))
    for name in NON_SEMANTIC:
        assert getattr(out, name).tobytes() == getattr(before, name).tobytes()
    cam = frames[0].camera
    p = (out.means @ cam.R.T + cam.t)
    u = cam.fx * p[:, 0] / p[:, 2] + cam.cx
    w = cam.fy * p[:, 1] / p[:, 2] + cam.cy
    inside = (u > 3) & (u < cam.width - 4) & (w > 3) & (w < cam.height - 4)
    assert inside.sum() > 10
    np.testing.assert_allclose(out.latents[inside], np.tile(v, (inside.sum(), 1)), rtol=0.05)
    assert np.all(np.isfinite(trace.totals(2)))


def test_phase2_zero_latents_start_from_mean_target():
    scene = plane_scene(10)
    v = np.array([0.5, 0.2, 0.1])
    frames = top_down_frames(scene, feats=FeatureImage(np.tile(v, (8, 8, 1))))
    ds = TrainingDataset(frames, scene.means, np.full((len(scene), 3), 0.5))
    out, trace = train_phase2(scene.copy(), ds, Codec.identity(3), TrainConfig(phase2_iters=5))
    assert trace.totals()[0] < 1e-3


def test_phase2_zero_target_keeps_latents_zero():
    scene = plane_scene(10)
    frames = top_down_frames(scene, feats=FeatureImage(np.zeros((8, 8, 3))))
    ds = TrainingDataset(frames, scene.means, np.full((len(scene), 3), 0.5))
    out, _ = train_phase2(scene.copy(), ds, Codec.identity(3), TrainConfig(phase2_iters=20))
    assert np.abs(out.latents).max() == 0


def test_phase2_latent_dim_mismatch():
    _, ds = small_dataset()
    with pytest.raises(ValueError):
        train_phase2(init_scene(ds, latent_dim=3), ds, Codec.identity(4), TrainConfig())


def test_prune_keeps_opaque_gaussians(rng):
    scene = sphere_scene(50)
    op = rng.uniform(0, 0.02, 50)
    op[::3] = 0.005
    scene.opacity_logits = logit(op)
    out = prune(scene, 0.005)
    assert np.all(out.opacities >= 0.005 * (1 - 1e-12))
    assert len(out) == np.sum(scene.opacities >= 0.005)


def test_prune_changes_training_loss_by_less_than_one_percent(rng):
    gt, ds = small_dataset(size=48)
    scene = gt.copy()
    idx = rng.choice(len(scene), 15, replace=False)
    scene.opacity_logits[idx] = logit(0.003)
    w = LossWeights()

    def loss(s):
        return sum(view_loss(render_view(s, f.camera), ViewTargets(f.rgb, f.affordance), w)[0] for f in ds.frames)

    before = loss(scene)
    after = loss(prune(scene, 0.005))
    assert after <= 1.01 * before


def test_training_is_deterministic_and_bounded():
    cfg = TrainConfig(phase1_iters=30, phase2_iters=10, prune_every=10, seed=3)
    emb = np.abs(np.random.default_rng(0).normal(size=(60, 3)))
    _, ds = small_dataset(embeddings=emb)
    a, ta = train(ds, cfg, Codec.identity(3))
    b, tb = train(ds, cfg, Codec.identity(3))
    assert a.digest() == b.digest()
    assert ta.rows == tb.rows
    assert np.all((a.affordances > 0) & (a.affordances < 1))
    for f in ds.frames:
        aff = render_view(a, f.camera).affordance
        assert aff.min() >= 0 and aff.max() <= 1
    np.testing.assert_allclose(np.linalg.norm(a.quats, axis=1), 1, atol=1e-6)


def test_loss_trace_csv(tmp_path):
    t = LossTrace()
    t.add(1, 0, 0.5, {"rgb": 0.4, "affordance": 0.1})
    t.add(2, 0, 0.2, {"semantic": 0.2})
    t.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "phase,iteration,total,rgb,affordance,semantic"
    assert lines[1] == "1,0,0.5,0.4,0.1," and lines[2] == "2,0,0.2,,,0.2"
    np.testing.assert_array_equal(t.totals(2), [0.2])
