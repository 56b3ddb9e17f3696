"""End-to-end CLI runs, in process, on a micro pipeline."""

import json
import os

import numpy as np
import pytest

import filelock

from moesplat.cli import main


MICRO = {
    "seed": 5,
    "scene": {
        "width": 24, "height": 24, "n_views": 8, "test_every": 4,
        "regions": [
            {"regime": "polynomial", "n_gaussians": 16,
             "center": [-1.0, 0.0, 0.0], "extent": [0.6, 0.6, 0.25],
             "amplitude": 0.45},
            {"regime": "keyframe", "n_gaussians": 16,
             "center": [1.0, 0.0, 0.0], "extent": [0.6, 0.6, 0.25],
             "amplitude": 0.15, "n_keys": 4},
        ],
    },
    "experts": {"kinds": ["polynomial", "keyframe"], "counts": [24, 24],
                "n_keys": 4},
    "train": {"stage1_steps": 30, "stage2_steps": 20, "distill_steps": 20,
              "prune_ratio": 0.4, "prune_rounds": 1,
              "prune_finetune_steps": 5},
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """A completed synth + train, shared by the read-only command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(MICRO))
    out = str(root / "run")
    assert main(["synth", "--config", str(cfg), "--out", out]) == 0
    assert main(["train", "--config", str(cfg), "--out", out]) == 0
    return cfg, out


def test_synth_outputs(run_dir):
    _, out = run_dir
    assert os.path.exists(os.path.join(out, "dataset.json"))
    assert os.path.exists(os.path.join(out, "scene.json"))
    assert os.path.exists(os.path.join(out, "config.json"))
    assert os.path.exists(os.path.join(out, "manifest.json"))
    assert os.path.exists(os.path.join(out, "views/view_000.npy"))


def test_train_outputs(run_dir):
    _, out = run_dir
    doc = json.loads(open(os.path.join(out, "train.json")).read())
    assert doc["psnr"] > 15.0
    assert 0.0 < doc["ssim"] <= 1.0
    assert os.path.exists(os.path.join(out, "model/model.json"))
    assert os.path.exists(os.path.join(out, "model/expert_00.expert"))
    assert os.path.exists(os.path.join(out, "logs/stage1_expert_00.csv"))
    assert os.path.exists(os.path.join(out, "logs/stage2_router.csv"))


def test_eval_single_pass_matches_multi(run_dir):
    cfg, out = run_dir
    assert main(["eval", "--config", str(cfg), "--out", out]) == 0
    multi = json.loads(open(os.path.join(out, "eval.json")).read())
    assert main(["eval", "--config", str(cfg), "--out", out,
                 "--single-pass"]) == 0
    single = json.loads(open(os.path.join(out, "eval.json")).read())
    assert single["single_pass"] is True
    assert multi["psnr"] == single["psnr"]
    assert multi["ssim"] == single["ssim"]
    assert len(multi["motion_specialization"]) == 2


def test_render_writes_every_view(run_dir):
    cfg, out = run_dir
    assert main(["render", "--config", str(cfg), "--out", out]) == 0
    for i in range(MICRO["scene"]["n_views"]):
        assert os.path.exists(os.path.join(out, f"renders/render_{i:03d}.npy"))
        assert os.path.exists(os.path.join(out, f"renders/render_{i:03d}.png"))


def test_render_threads_match_serial(run_dir, tmp_path):
    cfg, out = run_dir
    assert main(["render", "--config", str(cfg), "--out", out]) == 0
    serial = np.load(os.path.join(out, "renders/render_003.npy"))
    os.environ["MOESPLAT_THREADS"] = "4"
    try:
        assert main(["render", "--config", str(cfg), "--out", out]) == 0
    finally:
        del os.environ["MOESPLAT_THREADS"]
    threaded = np.load(os.path.join(out, "renders/render_003.npy"))
    assert np.array_equal(serial, threaded)


def test_prune_removes_requested_fraction(run_dir):
    cfg, out = run_dir
    assert main(["prune", "--config", str(cfg), "--out", out]) == 0
    doc = json.loads(open(os.path.join(out, "prune.json")).read())
    assert doc["gaussians_before"] == 48
    assert doc["gaussians_after"] == 29   # 48 - floor(0.4 * 48)
    assert os.path.exists(os.path.join(out, "model_pruned/model.json"))
    report = open(os.path.join(out, "prune_report.csv")).read().splitlines()
    assert report[0] == "round,expert,gaussian,score,kept"
    assert len(report) == 1 + 48


def test_distill_writes_students(run_dir):
    cfg, out = run_dir
    assert main(["distill", "--config", str(cfg), "--out", out]) == 0
    doc = json.loads(open(os.path.join(out, "distill.json")).read())
    assert set(doc) == {"expert_0", "expert_1"}
    assert doc["expert_0"]["kind"] == "polynomial"
    assert os.path.exists(os.path.join(out, "distilled/expert_00.expert"))


def test_train_is_bit_deterministic(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(MICRO))
    digests = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["synth", "--config", str(cfg), "--out", out]) == 0
        assert main(["train", "--config", str(cfg), "--out", out]) == 0
        manifest = json.loads(open(os.path.join(out, "manifest.json")).read())
        digests.append({k: v for k, v in manifest["files"].items()
                        if k.startswith("model/")})
    assert digests[0] == digests[1]
    assert any(k.endswith(".expert") for k in digests[0])


def test_seed_flag_changes_the_run(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(MICRO))
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    assert main(["synth", "--config", str(cfg), "--out", out_a]) == 0
    assert main(["synth", "--config", str(cfg), "--out", out_b,
                 "--seed", "9"]) == 0
    a = np.load(os.path.join(out_a, "views/view_000.npy"))
    b = np.load(os.path.join(out_b, "views/view_000.npy"))
    assert not np.array_equal(a, b)
    with pytest.raises(SystemExit):
        main(["synth", "--badflag"])
    assert main(["synth", "--out", str(tmp_path / "c"), "--seed", "-1"]) == 2


def test_exit_codes(tmp_path, capsys):
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"train": {"lr_colour": 1}}))
    assert main(["synth", "--config", str(bad_cfg),
                 "--out", str(tmp_path / "r")]) == 2

    # training without a dataset is a data error
    assert main(["train", "--out", str(tmp_path / "empty")]) == 3

    os.environ["MOESPLAT_THREADS"] = "zero"
    try:
        assert main(["synth", "--out", str(tmp_path / "r2")]) == 2
    finally:
        del os.environ["MOESPLAT_THREADS"]
    capsys.readouterr()


def test_locked_run_directory(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    lock = filelock.FileLock(out / ".moesplat.lock")
    with lock.acquire():
        code = main(["synth", "--out", str(out)])
    assert code == 4


def test_stats_flag_prints_counters(run_dir, capsys):
    cfg, out = run_dir
    assert main(["eval", "--config", str(cfg), "--out", out,
                 "--single-pass", "--stats"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines()
             if l.startswith("stat ")]
    stats = {l.split()[1]: int(l.split()[2]) for l in lines}
    n_test = len(json.loads(open(os.path.join(out, "dataset.json")).read())
                 ["test_indices"])
    assert stats["fused_passes"] >= n_test
    assert stats["projection_passes"] >= n_test
