import json
import math
import shutil
import subprocess
import sys

import filelock
import numpy as np
import pytest

from scpainter import cli, fileio
from scpainter.geometry import lateral_shift
from scpainter.metrics import psnr
from scpainter.splat import make_box_asset


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert cli.main(["synth-scene", "--out", str(d)]) == 0
    return d


def test_psnr_closed_forms():
    a = np.full((4, 4, 3), 0.3)
    assert math.isinf(psnr(a, a))
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(a, a[:2])


def test_synth_scene_is_idempotent(tmp_path, scene_dir):
    assert cli.main(["--seed", "0", "--out", str(tmp_path), "synth-scene"]) == 0
    assert tree_bytes(tmp_path) == tree_bytes(scene_dir)


def test_unproject(tmp_path, scene_dir):
    assert cli.main(["unproject", "--scene", str(scene_dir), "--frames", "3:3", "--out", str(tmp_path / "e")]) == 0
    assert not list((tmp_path / "e").glob("*.ply"))
    assert cli.main(["unproject", "--scene", str(scene_dir), "--frames", "2:3", "--out", str(tmp_path / "o")]) == 0
    plys = list((tmp_path / "o").glob("*.ply"))
    assert [p.name for p in plys] == ["points_0002.ply"]
    frame = fileio.load_scene(scene_dir).frames[2]
    assert len(fileio.read_point_ply(plys[0])) == int(frame.valid.sum())


def test_unproject_user_errors(tmp_path, scene_dir):
    broken = tmp_path / "broken"
    shutil.copytree(scene_dir, broken)
    (broken / "frames" / "depth_0001.scpt").write_bytes(b"garbage")
    assert cli.main(["unproject", "--scene", str(broken), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["unproject", "--scene", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["unproject", "--scene", str(scene_dir), "--frames", "a:b", "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["unproject", "--scene", str(scene_dir)]) == 2
    assert cli.main(["no-such-command"]) == 2


def test_render_traj_zero_shift_reproduces_frame(tmp_path, scene_dir):
    out = tmp_path / "b"
    args = ["render-traj", "--scene", str(scene_dir), "--frames", "4:5", "--no-assets", "--shift", "0"]
    assert cli.main(args + ["--out", str(out)]) == 0
    b = fileio.read_bundle(out)
    frame = fileio.load_scene(scene_dir).frames[4]
    assert np.array_equal(b.coverage[0, 0], frame.valid)
    assert np.array_equal(np.transpose(b.I[0], (1, 2, 0))[frame.valid], frame.image[frame.valid])
    doc = json.loads((out / "bundle.json").read_text())
    assert doc["shift"] == 0.0 and doc["frames"] == [4]


def test_render_traj_shift_moves_cameras_and_is_idempotent(tmp_path, scene_dir):
    scene = fileio.load_scene(scene_dir)
    for run in ("a", "b"):
        assert cli.main(["render-traj", "--scene", str(scene_dir), "--shift", "2", "--jobs", "2",
                         "--out", str(tmp_path / run)]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    b = fileio.read_bundle(tmp_path / "a")
    for (K, pose), f in zip(b.trajectory.cameras, scene.frames):
        assert np.allclose(pose.center, f.pose.center + 2.0 * f.pose.rotation[:, 0], atol=1e-9)
        assert lateral_shift(pose, -2.0).allclose(f.pose, atol=1e-9)
    assert np.all(b.asset_mask_binary <= b.coverage)


def test_render_traj_rejects_mismatched_asset(tmp_path, scene_dir):
    asset_path = tmp_path / "skinny.ply"
    fileio.write_asset(asset_path, make_box_asset([4.2, 0.6, 1.5], [0.5, 0.5, 0.5]))
    rc = cli.main(["render-traj", "--scene", str(scene_dir), "--asset", str(asset_path), "--out", str(tmp_path / "o")])
    assert rc == 2
    ok = tmp_path / "ok.ply"
    fileio.write_asset(ok, make_box_asset([4.0, 1.7, 1.4], [0.1, 0.2, 0.9]))
    assert cli.main(["render-traj", "--scene", str(scene_dir), "--asset", str(ok), "--out", str(tmp_path / "p")]) == 0


def test_build_pairs_count_determinism_and_clamp(tmp_path, scene_dir, caplog):
    for run in ("a", "b"):
        assert cli.main(["build-pairs", "--scene", str(scene_dir), "--k", "3", "--seed", "5",
                         "--out", str(tmp_path / run)]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "pairs.json").read_text())
    n = len(fileio.load_scene(scene_dir))
    assert len(manifest["pairs"]) == n  # every frame of a multi-frame scene has a neighbor window
    assert all(len(p["neighbors"]) == 3 and p["t"] not in p["neighbors"] for p in manifest["pairs"])
    with caplog.at_level("WARNING", logger="scpainter"):
        assert cli.main(["build-pairs", "--scene", str(scene_dir), "--k", "40", "--out", str(tmp_path / "c")]) == 0
    assert "clamping" in caplog.text
    manifest = json.loads((tmp_path / "c" / "pairs.json").read_text())
    assert all(len(p["neighbors"]) == n - 1 for p in manifest["pairs"])
    assert cli.main(["build-pairs", "--scene", str(scene_dir), "--k", "0", "--out", str(tmp_path / "d")]) == 2


def test_build_pairs_on_single_frame_scene(tmp_path):
    assert cli.main(["synth-scene", "--frames", "1", "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["build-pairs", "--scene", str(tmp_path / "s"), "--out", str(tmp_path / "p")]) == 0
    assert json.loads((tmp_path / "p" / "pairs.json").read_text())["pairs"] == []


def test_train_sample_eval_pipeline(tmp_path, scene_dir):
    pairs = tmp_path / "pairs"
    assert cli.main(["build-pairs", "--scene", str(scene_dir), "--kind", "insertion", "--out", str(pairs)]) == 0
    for run in ("ck1", "ck2"):
        assert cli.main(["train-toy", "--pairs", str(pairs), "--iters", "30", "--seed", "2",
                         "--out", str(tmp_path / run)]) == 0
    assert tree_bytes(tmp_path / "ck1") == tree_bytes(tmp_path / "ck2")
    lines = (tmp_path / "ck1" / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss" and len(lines) == 31

    for run in ("s1", "s2"):
        assert cli.main(["sample", "--ckpt", str(tmp_path / "ck1" / "ckpt.bin"), "--bundle", str(pairs / "pair_0000"),
                         "--steps", "3", "--seed", "1", "--out", str(tmp_path / run)]) == 0
    assert tree_bytes(tmp_path / "s1") == tree_bytes(tmp_path / "s2")

    out = tmp_path / "ev"
    assert cli.main(["eval", "--generated", str(tmp_path / "s1"), "--gt", str(pairs / "pair_0000"),
                     "--gen-pattern", "frame_*.png", "--gt-pattern", "target_*.png",
                     "--bundle", str(pairs / "pair_0000"), "--out", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["n_frames"] == 1 and report["frames"][0]["psnr_db"] > 0
    assert 0 < report["asset_fraction"] <= report["coverage_fraction"] <= 1
    assert "runtime_s" not in report

    assert cli.main(["train-toy", "--pairs", str(tmp_path / "nothing"), "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["train-toy", "--pairs", str(pairs), "--dropout", "2", "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["sample", "--ckpt", str(tmp_path / "none.bin"), "--bundle", str(pairs / "pair_0000"),
                     "--out", str(tmp_path / "x")]) == 2


def test_eval_closed_forms_and_errors(tmp_path):
    gen, gt = tmp_path / "gen", tmp_path / "gt"
    gen.mkdir()
    gt.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        img = rng.uniform(0.2, 0.8, (8, 8, 3))
        fileio.write_tensor(gt / f"f_{i}.scpt", img)
        fileio.write_tensor(gen / f"f_{i}.scpt", img + (0.1 if i else 0.0))
    args = ["eval", "--generated", str(gen), "--gt", str(gt), "--gen-pattern", "*.scpt", "--gt-pattern", "*.scpt"]
    assert cli.main(args + ["--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert report["frames"][0]["exact"] and report["frames"][0]["psnr_db"] is None
    for f in report["frames"][1:]:
        # float32 storage perturbs the 0.1 offset slightly
        assert f["psnr_db"] == pytest.approx(20.0, abs=1e-5)
    assert report["mean_psnr_db"] == pytest.approx(20.0, abs=1e-5)
    assert not report["all_exact"]
    csv_lines = (tmp_path / "o" / "metrics.csv").read_text().splitlines()
    assert csv_lines[0] == "index,generated,ground_truth,mse,psnr_db" and csv_lines[1].endswith(",inf")

    (gen / "f_2.scpt").unlink()
    assert cli.main(args + ["--out", str(tmp_path / "o2")]) == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["eval", "--generated", str(empty), "--gt", str(empty), "--out", str(tmp_path / "o3")]) == 2


def test_lock_blocks_concurrent_writers(tmp_path, scene_dir):
    out = tmp_path / "locked"
    out.mkdir()
    with filelock.FileLock(str(out / cli.LOCK_NAME)):
        assert cli.main(["unproject", "--scene", str(scene_dir), "--out", str(out)]) == 2
    assert cli.main(["unproject", "--scene", str(scene_dir), "--frames", "0:1", "--out", str(out)]) == 0


def test_internal_failure_exits_with_1(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("invariant broken")

    monkeypatch.setattr(cli, "cmd_synth_scene", boom)
    assert cli.main(["synth-scene", "--out", str(tmp_path)]) == 1


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "scpainter.cli", "eval", "--generated", str(tmp_path),
                          "--gt", str(tmp_path), "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 2
    assert "no frames" in res.stderr


def test_parse_frame_range():
    assert cli.parse_frame_range(None, 4) == [0, 1, 2, 3]
    assert cli.parse_frame_range("1:", 4) == [1, 2, 3]
    assert cli.parse_frame_range(":2", 4) == [0, 1]
    assert cli.parse_frame_range("-2:", 4) == [2, 3]
    with pytest.raises(cli.UsageError):
        cli.parse_frame_range("1", 4)


def test_shift_must_be_finite(scene_dir):
    scene = fileio.load_scene(scene_dir)
    with pytest.raises(cli.UsageError):
        cli.render_shifted(scene, float("inf"))
    with pytest.raises(cli.UsageError):
        cli.render_shifted(scene, 1.0, frames=[])
