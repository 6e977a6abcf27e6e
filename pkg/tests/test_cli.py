import hashlib

import numpy as np
import pytest

from featsplat.cli import main
from featsplat.codec import load_codec
from featsplat.dataset import ingest_dataset, save_cameras, write_dataset
from featsplat.query import load_mask, save_mask
from featsplat.raster import render_view
from featsplat.scene import load_scene, read_ply
from featsplat.synthetic import (
    kitchen_scene, orbit_cameras, perturbed_dataset, random_embeddings, render_frames, sphere_scene,
    write_kitchen_pipeline,
)
from featsplat.trainer import TrainConfig, train


def rgb_hash(rgb):
    return hashlib.sha256(np.ascontiguousarray(rgb, dtype="<f8").tobytes()).hexdigest()


@pytest.fixture
def kitchen(tmp_path):
    write_kitchen_pipeline(tmp_path)
    return tmp_path


@pytest.fixture(scope="module")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    gt = sphere_scene(40)
    cams = orbit_cameras(4, 3.5, 24, 24, fov_deg=45)
    frames = render_frames(gt, cams, random_embeddings(40, 8, seed=3))
    write_dataset(root / "data", perturbed_dataset(gt, frames, 0.03, seed=1))
    save_cameras(root / "heldout.json", orbit_cameras(5, 3.5, 24, 24, fov_deg=45)[1:2])
    return root


def test_no_args_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["render", "--scene", "x.splat"],
    ["edit", "--scene", "s", "--mask", "m", "--out", "o", "--translate", "1,2"],
    ["train-codec", "--dataset", "d", "--out", "c", "--latent-dim", "three"],
    ["grad-check", "--scene", "s.splat"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["render", "--scene", str(tmp_path / "missing.splat"), "--cameras", "c.json",
                 "--out-dir", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
    (tmp_path / "bad.splat").write_bytes(b"garbage")
    assert main(["infill", "--scene", str(tmp_path / "bad.splat"), "--mask", "m", "--out", "o"]) == 2


def test_render_writes_buffers_and_hash(kitchen, capsys):
    out = kitchen / "r"
    assert main(["render", "--scene", str(kitchen / "scene.splat"), "--cameras", str(kitchen / "cameras.json"),
                 "--out-dir", str(out)]) == 0
    printed = capsys.readouterr().out
    for suffix in ("rgb.ppm", "affordance.ppm", "alpha.ppm", "semantic.featf1", "depth.featf1"):
        assert (out / f"view_0000_{suffix}").is_file()
    from featsplat.dataset import load_cameras
    expected = rgb_hash(render_view(load_scene(kitchen / "scene.splat"), load_cameras(kitchen / "cameras.json")[0]).rgb)
    assert expected in printed


def test_query_edit_infill_rank_export(kitchen, capsys):
    common = ["--codec", str(kitchen / "codec.bin"), "--embeddings", str(kitchen / "embeddings.tsv")]
    scene = str(kitchen / "scene.splat")
    assert main(["query", "--scene", scene, *common, "--positive", "fruit", "--negative", "table",
                 "--cameras", str(kitchen / "cameras.json"), "--out", str(kitchen / "fruit.idx")]) == 0
    _, labels, _ = kitchen_scene()
    np.testing.assert_array_equal(load_mask(kitchen / "fruit.idx"), np.flatnonzero(labels == 3))
    assert (kitchen / "similarity_0000.ppm").is_file()

    assert main(["edit", "--scene", scene, "--mask", str(kitchen / "fruit.idx"), "--translate", "0.1,0,0",
                 "--out", str(kitchen / "moved.splat")]) == 0
    moved, orig = load_scene(kitchen / "moved.splat"), load_scene(scene)
    sel = labels == 3
    np.testing.assert_allclose(moved.means[sel] - orig.means[sel], np.tile([0.1, 0, 0], (sel.sum(), 1)), atol=1e-6)
    np.testing.assert_array_equal(moved.means[~sel], orig.means[~sel])

    pot = np.flatnonzero(labels == 1)
    save_mask(pot, kitchen / "pot.idx")
    assert main(["infill", "--scene", scene, "--mask", str(kitchen / "pot.idx"),
                 "--out", str(kitchen / "holed.splat")]) == 0
    assert len(load_scene(kitchen / "holed.splat")) > len(orig) - len(pot)

    assert main(["rank-grasps", "--scene", scene, "--mask", str(kitchen / "pot.idx"),
                 "--candidates", str(kitchen / "grasps_pot.csv"), "--out", str(kitchen / "ranked.csv")]) == 0
    rows = (kitchen / "ranked.csv").read_text().splitlines()
    assert rows[0].endswith("nu,roi_count") and len(rows) == 3

    assert main(["export-pc", "--scene", scene, "--mask", str(kitchen / "pot.idx"),
                 "--out", str(kitchen / "pot.ply")]) == 0
    pts, _, _ = read_ply(kitchen / "pot.ply")
    assert len(pts) == len(pot)


def test_pipeline_cli_deterministic(kitchen):
    reports = []
    for run in ("a", "b"):
        assert main(["--seed", "3", "pipeline", "--config", str(kitchen / "pipeline.ini"),
                     "--output", str(kitchen / run)]) == 0
        reports.append([(kitchen / run / f"stage_{k}_report.txt").read_bytes() for k in (1, 2)])
    assert reports[0] == reports[1]


def test_pipeline_cli_stage_failure(tmp_path, capsys):
    cfg = write_kitchen_pipeline(tmp_path, stage2_candidates=False)
    assert main(["pipeline", "--config", str(cfg)]) == 2
    assert "stage 2" in capsys.readouterr().err


def test_grad_check_cli(capsys):
    assert main(["grad-check", "--scenes", "2"]) == 0
    assert "means" in capsys.readouterr().out


def test_train_then_render_reproduces_hash(tiny_dataset_dir, capsys):
    d = tiny_dataset_dir
    assert main(["--seed", "5", "train-codec", "--dataset", str(d / "data"), "--latent-dim", "3", "--epochs", "30",
                 "--out", str(d / "codec.bin"), "--trace", str(d / "codec.csv")]) == 0
    assert len((d / "codec.csv").read_text().splitlines()) == 31
    assert main(["--seed", "5", "train", "--dataset", str(d / "data"), "--codec", str(d / "codec.bin"),
                 "--phase1-iters", "12", "--phase2-iters", "6", "--out", str(d / "scene.splat"),
                 "--trace", str(d / "trace.csv")]) == 0
    capsys.readouterr()
    assert main(["render", "--scene", str(d / "scene.splat"), "--cameras", str(d / "heldout.json"),
                 "--out-dir", str(d / "render")]) == 0
    printed = capsys.readouterr().out

    ds = ingest_dataset(d / "data")
    trained, _ = train(ds, TrainConfig(phase1_iters=12, phase2_iters=6, seed=5), load_codec(d / "codec.bin"))
    assert trained.equals(load_scene(d / "scene.splat"))
    from featsplat.dataset import load_cameras
    assert rgb_hash(render_view(trained, load_cameras(d / "heldout.json")[0]).rgb) in printed
