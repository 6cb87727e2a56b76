import json
import subprocess
import sys

import numpy as np
import pytest

from polysplat.cli import main
from polysplat.population import init_from_sfm
from polysplat.primitives import OCTAHEDRON, TETRAHEDRON
from polysplat.sceneio import load_checkpoint, load_colmap, load_depth, save_checkpoint
from polysplat.synthetic import make_fixture_scene, random_scene


def records(text):
    return [json.loads(l) for l in text.splitlines() if l.startswith("{")]


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    make_fixture_scene(root, n_prims=6, n_views=4, size=24, seed=3)
    return root


@pytest.fixture
def ckpt(tmp_path):
    prims = random_scene(OCTAHEDRON, 10, np.random.default_rng(2), bounds=0.6)
    return save_checkpoint(prims, tmp_path / "c.ply")


def test_train_zero_iterations_is_init(scene_dir, tmp_path, capsys):
    assert main(["train", "--scene", str(scene_dir), "--output", str(tmp_path / "o"),
                 "--iterations", "0", "--kind", "tetrahedron", "--seed", "5"]) == 0
    out = load_checkpoint(tmp_path / "o" / "final.ply").prims
    s = load_colmap(scene_dir)
    init = init_from_sfm(s.points, s.colors, TETRAHEDRON, seed=5, dtype=np.float32)
    for name in ("centers", "rotations", "distances", "opacity_logits", "sh"):
        assert np.array_equal(getattr(out, name), getattr(init, name)), name
    assert records(capsys.readouterr().out)[-1]["event"] == "saved"


def test_train_deterministic(scene_dir, tmp_path):
    args = ["train", "--scene", str(scene_dir), "--iterations", "30", "--deterministic",
            "--seed", "1"]
    assert main(args + ["--output", str(tmp_path / "a")]) == 0
    assert main(args + ["--output", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "final.ply").read_bytes() == (tmp_path / "b" / "final.ply").read_bytes()
    events = [json.loads(l) for l in (tmp_path / "a" / "events.jsonl").read_text().splitlines()]
    assert events[0]["event"] == "start" and events[-1]["event"] == "done"


def test_train_checkpoints(scene_dir, tmp_path):
    assert main(["train", "--scene", str(scene_dir), "--output", str(tmp_path / "o"),
                 "--iterations", "20", "--checkpoint-every", "10"]) == 0
    assert load_checkpoint(tmp_path / "o" / "checkpoint_000010.ply").iteration == 10


def test_train_missing_scene(tmp_path, capsys):
    assert main(["train", "--scene", str(tmp_path / "nope"), "--output", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_train_bad_config(scene_dir, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("train.bogus = 3\n")
    assert main(["train", "--scene", str(scene_dir), "--output", str(tmp_path / "o"),
                 "--config", str(cfg)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["render"])
    assert exc.value.code == 2


def test_render_modes(ckpt, tmp_path, capsys):
    assert main(["render", "--checkpoint", str(ckpt), "--output", str(tmp_path / "r"),
                 "--views", "2", "--width", "20", "--height", "16",
                 "--mode", "color", "--mode", "alpha", "--mode", "depth"]) == 0
    recs = records(capsys.readouterr().out)
    assert len(recs) == 2
    assert load_depth(recs[0]["depth"]).shape == (16, 20)
    for key in ("color", "alpha"):
        assert (tmp_path / "r" / recs[0][key].split("/")[-1]).exists()


def test_render_empty_depth_invalid(tmp_path, capsys):
    empty = random_scene(OCTAHEDRON, 1).select(np.zeros(1, bool))
    path = save_checkpoint(empty, tmp_path / "e.ply")
    assert main(["render", "--checkpoint", str(path), "--output", str(tmp_path / "r"),
                 "--views", "1", "--width", "8", "--height", "8", "--mode", "depth"]) == 0
    d = load_depth(records(capsys.readouterr().out)[0]["depth"])
    assert np.all(np.isnan(d))


def test_render_oracle_agrees(tmp_path, capsys):
    prims = random_scene(OCTAHEDRON, 8, np.random.default_rng(7), non_overlapping=True,
                         bounds=0.7)
    path = save_checkpoint(prims, tmp_path / "c.ply")
    common = ["--checkpoint", str(path), "--views", "2", "--width", "24", "--height", "24",
              "--no-ray-space", "--precision", "double", "--mode", "depth"]
    assert main(["render", *common, "--output", str(tmp_path / "a")]) == 0
    assert main(["render", *common, "--output", str(tmp_path / "b"), "--oracle"]) == 0
    recs = records(capsys.readouterr().out)
    for ra, rb in zip(recs[:2], recs[2:]):
        a, b = load_depth(ra["depth"]), load_depth(rb["depth"])
        np.testing.assert_array_equal(np.isnan(a), np.isnan(b))
        assert np.nanmax(np.abs(a - b)) < 1e-3


def test_eval_self_consistency(scene_dir, tmp_path, capsys):
    # a checkpoint against its own renders; only 8-bit quantization separates them
    gt = make_fixture_scene(tmp_path / "s", n_prims=6, n_views=3, size=24, seed=4)
    path = save_checkpoint(gt, tmp_path / "gt.ply")
    rdir = tmp_path / "r"
    assert main(["render", "--checkpoint", str(path), "--output", str(rdir), "--scene",
                 str(tmp_path / "s"), "--precision", "double", "--no-ray-space"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(path), "--scene", str(tmp_path / "s"),
                 "--images", str(rdir), "--precision", "double", "--no-ray-space",
                 "--output", str(tmp_path / "m.jsonl")]) == 0
    summary = records(capsys.readouterr().out)[-1]
    assert summary["event"] == "summary" and summary["count"] == 6 and summary["views"] == 3
    assert summary["mean_ssim"] == pytest.approx(1.0, abs=1e-4)
    assert summary["mean_psnr"] > 50.0
    assert records((tmp_path / "m.jsonl").read_text())[-1] == summary


def test_eval_missing_gt(scene_dir, ckpt, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(ckpt), "--scene", str(scene_dir),
                 "--images", str(tmp_path / "empty")]) == 2
    assert "missing ground-truth" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path):
    assert main(["bench", "--checkpoint", str(tmp_path / "x.ply")]) == 2


def test_bench_schema(ckpt, capsys):
    assert main(["bench", "--checkpoint", str(ckpt), "--views", "2", "--width", "32",
                 "--height", "32"]) == 0
    recs = records(capsys.readouterr().out)
    bench = recs[-1]
    for key in ("preprocess_ms", "sort_tile_ms", "render_ms", "frustum", "tile_list",
                "iterated", "intersected"):
        assert key in bench
    for v in recs[:-1]:
        assert v["intersected"] <= v["iterated"]
        assert v["frustum"] <= 10


@pytest.mark.parametrize("fmt", ["ascii", "binary"])
def test_export_round_trip(ckpt, tmp_path, fmt):
    out = tmp_path / f"e_{fmt}.ply"
    assert main(["export", str(ckpt), str(out), "--format", fmt]) == 0
    back = tmp_path / "back.ply"
    assert main(["export", str(out), str(back)]) == 0
    assert back.read_bytes() == ckpt.read_bytes()


def test_check_grad_passes(capsys):
    assert main(["check-grad", "--precision", "double"]) == 0
    summary = records(capsys.readouterr().out)[-1]
    assert summary["passed"] and summary["failed"] == 0 and summary["checked"] > 0


def test_check_grad_detects_corruption(capsys):
    assert main(["check-grad", "--precision", "double", "--corrupt"]) != 0
    assert records(capsys.readouterr().out)[-1]["failed"] > 0


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "polysplat", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "check-grad" in r.stdout
