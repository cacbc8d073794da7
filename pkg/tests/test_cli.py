import json
import os
import subprocess
import sys

import numpy as np
import pytest

from mvdet.cli import main
from mvdet.config import RunConfig, dump_config
from mvdet.synth import read_manifest, read_scene


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset, config and trained checkpoint shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = os.path.join(root, "data")
    assert (
        run_cli(
            "gen", "--out", data, "--scenes", "2", "--val-scenes", "2",
            "--seed", "3", "--cameras", "2", "--image-size", "64",
            "--classes", "3", "--min-objects", "1", "--max-objects", "2",
        )
        == 0
    )
    cfg = RunConfig(
        seed=5,
        dataset=os.path.join(data, "manifest.txt"),
        out_dir=os.path.join(root, "run"),
        steps=8,
        num_layers=2,
        num_queries=6,
        hidden=16,
        num_heads=4,
        num_classes=3,
    )
    cfg_path = os.path.join(root, "run.cfg")
    with open(cfg_path, "w") as fh:
        fh.write(dump_config(cfg))
    assert run_cli("train", "--config", cfg_path) == 0
    ckpt = os.path.join(root, "run", "checkpoint.bin")
    assert os.path.exists(ckpt)
    return {"root": root, "data": data, "cfg_path": cfg_path, "ckpt": ckpt}


def test_gen_writes_manifest_and_is_idempotent(tmp_path):
    out = str(tmp_path / "ds")
    args = [
        "gen", "--out", out, "--scenes", "2", "--val-scenes", "1",
        "--seed", "9", "--cameras", "1", "--image-size", "64",
    ]
    assert run_cli(*args) == 0
    manifest = os.path.join(out, "manifest.txt")
    listing = read_manifest(manifest)
    assert len(listing["train"]) == 2 and len(listing["val"]) == 1
    blob = open(listing["train"][0], "rb").read()
    assert run_cli(*args) == 0
    assert open(listing["train"][0], "rb").read() == blob


def test_usage_error_exit_code_2():
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--no-such-flag"])
    assert exc.value.code == 2


def test_train_missing_dataset_exit_1(tmp_path):
    cfg = RunConfig(dataset=str(tmp_path / "missing.txt"), out_dir=str(tmp_path / "o"), steps=1)
    path = str(tmp_path / "c.cfg")
    open(path, "w").write(dump_config(cfg))
    assert run_cli("train", "--config", path) == 1


def test_eval_writes_reports(workspace, tmp_path):
    out = str(tmp_path / "eval")
    assert (
        run_cli(
            "eval", "--config", workspace["cfg_path"], "--checkpoint", workspace["ckpt"],
            "--out", out,
        )
        == 0
    )
    report = json.load(open(os.path.join(out, "report.json")))
    assert 0.0 <= report["mAP"] <= 1.0
    assert os.path.exists(os.path.join(out, "predictions.txt"))
    assert os.path.exists(os.path.join(out, "ground_truth.txt"))
    text = open(os.path.join(out, "report.txt")).read()
    assert "NDS" in text


def test_eval_with_nms_and_overlap_flags(workspace, tmp_path):
    out1 = str(tmp_path / "nms")
    assert (
        run_cli(
            "eval", "--config", workspace["cfg_path"], "--checkpoint", workspace["ckpt"],
            "--out", out1, "--with-nms",
        )
        == 0
    )
    out2 = str(tmp_path / "overlap")
    assert (
        run_cli(
            "eval", "--config", workspace["cfg_path"], "--checkpoint", workspace["ckpt"],
            "--out", out2, "--overlap-only",
        )
        == 0
    )
    report = json.load(open(os.path.join(out2, "report.json")))
    assert report["num_gt"] >= 0


def test_eval_rejects_mismatched_checkpoint(workspace, tmp_path):
    cfg = RunConfig(
        seed=5, dataset=os.path.join(workspace["data"], "manifest.txt"),
        out_dir=str(tmp_path / "x"), steps=1,
        num_layers=2, num_queries=9, hidden=16, num_heads=4, num_classes=3,
    )
    path = str(tmp_path / "other.cfg")
    open(path, "w").write(dump_config(cfg))
    assert (
        run_cli(
            "eval", "--config", path, "--checkpoint", workspace["ckpt"],
            "--out", str(tmp_path / "out"),
        )
        == 1
    )


def test_bench_command(workspace, tmp_path):
    out = str(tmp_path / "timing.json")
    assert (
        run_cli(
            "bench", "--config", workspace["cfg_path"], "--checkpoint", workspace["ckpt"],
            "--out", out, "--scenes", "1", "--repetitions", "3",
        )
        == 0
    )
    payload = json.load(open(out))
    assert [p["variant"] for p in payload] == [
        "no_nms", "per_camera_nms", "per_camera_plus_global_nms",
    ]
    assert payload[2]["mean_seconds"] >= payload[0]["mean_seconds"]


def test_gradcheck_command_passes():
    assert run_cli("gradcheck", "--max-coords", "20") == 0


def test_gradcheck_detects_corrupted_backward(monkeypatch):
    import mvdet.autodiff as ad

    real = ad._BACKWARD["sigmoid"]

    def corrupted(node, g):
        (gx,) = real(node, g)
        return (gx * 1.01,)

    monkeypatch.setitem(ad._BACKWARD, "sigmoid", corrupted)
    assert run_cli("gradcheck", "--max-coords", "20") == 1


def test_render_command(workspace, tmp_path):
    listing = read_manifest(os.path.join(workspace["data"], "manifest.txt"))
    scene_path = listing["val"][0]
    out = str(tmp_path / "imgs")
    assert (
        run_cli(
            "render", "--config", workspace["cfg_path"], "--checkpoint", workspace["ckpt"],
            "--scene", scene_path, "--out", out, "--per-layer",
        )
        == 0
    )
    files = sorted(os.listdir(out))
    # 2 layers x (2 cameras + 1 BEV)
    assert len(files) == 6
    assert any(f.endswith("bev.png") for f in files)


def test_render_overlay_corners_match_projection(workspace):
    from mvdet.viz import box_corner_pixels
    from mvdet.geometry import project, denormalize_uv
    from mvdet.boxes import corners_3d

    listing = read_manifest(os.path.join(workspace["data"], "manifest.txt"))
    scene = read_scene(listing["val"][0])
    cam = scene.rig[0]
    for box in scene.boxes:
        pix, front = box_corner_pixels(cam, box)
        for corner, p, ok in zip(corners_3d(box), pix, front):
            proj = project(cam, corner)
            if proj.depth > 0:
                assert ok
                expect = denormalize_uv(proj.uv_norm, cam.width, cam.height)
                np.testing.assert_allclose(p, expect, atol=1e-12)


def test_console_entry_point():
    out = subprocess.run(
        [sys.executable, "-m", "mvdet.cli", "--help"], capture_output=True, text=True
    )
    assert out.returncode == 0
    for cmd in ("gen", "train", "eval", "bench", "gradcheck", "render"):
        assert cmd in out.stdout
