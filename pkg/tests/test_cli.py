"""End-to-end command-line behavior: artifacts, determinism, exit codes."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from semgan import datagen, trainer
from semgan.cli import main


def run(argv):
    return main([str(a) for a in argv])


def test_gen_data_writes_dataset_previews_manifest(tmp_path):
    out = tmp_path / "d"
    code = run(["gen-data", "--mode", "scene", "--n", 16, "--h", 32, "--w", 32,
                "--classes", 4, "--seed", 1, "--out", out])
    assert code == 0
    ds = datagen.read_dataset(out / "data.sdl")
    assert len(ds) == 16 and ds.mode == "scene"
    assert (out / "preview").is_dir()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 1


def test_gen_data_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["gen-data", "--mode", "keypoint", "--n", 8, "--h", 32, "--w", 32,
            "--keypoints", 6, "--seed", 3]
    assert run(args + ["--out", a]) == 0
    assert run(args + ["--out", b]) == 0
    assert (a / "data.sdl").read_bytes() == (b / "data.sdl").read_bytes()


def test_gen_data_palette_error_exit_2(tmp_path, capsys):
    code = run(["gen-data", "--mode", "scene", "--n", 4, "--classes", 40,
                "--seed", 0, "--out", tmp_path / "x"])
    assert code == 2
    assert "classes" in capsys.readouterr().err


def test_argparse_usage_error_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(["gen-data", "--mode", "nonsense", "--n", 4, "--out", tmp_path / "x"])
    assert exc.value.code == 2


def _make_data(tmp_path, n=16, mode="scene", k=3, seed=1):
    out = tmp_path / f"data_{mode}_{seed}"
    flag = "--classes" if mode == "scene" else "--keypoints"
    assert run(["gen-data", "--mode", mode, "--n", n, "--h", 32, "--w", 32,
                flag, k, "--seed", seed, "--out", out]) == 0
    return out / "data.sdl"


TINY_TRAIN = ["--epochs", 2, "--warmup", 1, "--batch", 4, "--scales", 1,
              "--gen-width", 4, "--gen-residual", 1, "--disc-width", 4,
              "--lambda-fm", 1.0, "--lambda-perc", 1.0, "--ckpt-every", 1]


def test_train_eval_render_roundtrip(tmp_path):
    data = _make_data(tmp_path)
    out = tmp_path / "run"
    assert run(["train", "--data", data, "--out", out, "--seed", 5] + TINY_TRAIN) == 0
    assert (out / "loss_log.csv").exists()
    ckpts = sorted(out.glob("ckpt_epoch*.sdc"))
    assert len(ckpts) == 2

    probe_path = tmp_path / "probe.sdc"
    probe_data = _make_data(tmp_path, n=160, seed=9)
    assert run(["train-probe", "--data", probe_data, "--out", probe_path,
                "--holdout", 32, "--epochs", 6]) == 0

    eval_out = tmp_path / "eval"
    assert run(["eval", "--ckpt", ckpts[-1], "--data", data, "--probe", probe_path,
                "--out", eval_out, "--gen-width", 4, "--gen-residual", 1]) == 0
    report = json.loads((eval_out / "report.json").read_text())
    assert {"frechet", "miou", "pixel_acc", "class_acc"} <= set(report)

    render_out = tmp_path / "render"
    assert run(["render", "--ckpt", ckpts[-1], "--data", data, "--n", 8,
                "--out", render_out, "--gen-width", 4, "--gen-residual", 1]) == 0
    from PIL import Image

    grid = Image.open(render_out / "grid.png")
    assert grid.size == (3 * 32, 8 * 32)  # truth | semantics | output


def test_train_identical_seeds_identical_csv(tmp_path):
    data = _make_data(tmp_path)
    a, b = tmp_path / "r1", tmp_path / "r2"
    args = ["train", "--data", data, "--seed", 7] + TINY_TRAIN
    assert run(args + ["--out", a]) == 0
    assert run(args + ["--out", b]) == 0
    assert (a / "loss_log.csv").read_bytes() == (b / "loss_log.csv").read_bytes()


def test_train_missing_dataset_exit_2(tmp_path, capsys):
    code = run(["train", "--data", tmp_path / "nope.sdl", "--out", tmp_path / "o"] + TINY_TRAIN)
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_train_bad_variant_exit_2(tmp_path, capsys):
    data = _make_data(tmp_path)
    code = run(["train", "--data", data, "--out", tmp_path / "o",
                "--variant", "bogus"] + TINY_TRAIN)
    assert code == 2


def test_eval_missing_ckpt_exit_2(tmp_path):
    data = _make_data(tmp_path)
    assert run(["eval", "--ckpt", tmp_path / "no.sdc", "--data", data,
                "--out", tmp_path / "e"]) == 2


def test_ablate_two_variants_two_rows(tmp_path):
    train_data = _make_data(tmp_path, n=160, seed=2)
    test_data = _make_data(tmp_path, n=16, seed=3)
    out = tmp_path / "grid"
    assert run(["ablate", "--data", train_data, "--test-data", test_data,
                "--variants", "baseline,c2f", "--seeds", "0", "--holdout", 32,
                "--out", out] + TINY_TRAIN) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 3  # header + 2 variants
    assert (out / "probe.sdc").exists()


def test_config_file_supplies_defaults_flags_win(tmp_path):
    data = _make_data(tmp_path)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=2\nwarmup=1\nbatch=4\nscales=1\ngen_width=4\n"
                   "gen_residual=1\ndisc_width=4\nlambda_fm=1.0\nlambda_perc=1.0\n"
                   "ckpt_every=1\nseed=11\n")
    out1 = tmp_path / "c1"
    assert run(["train", "--config", cfg, "--data", data, "--out", out1]) == 0
    manifest = json.loads((out1 / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 11
    # explicit flag beats the config value
    out2 = tmp_path / "c2"
    assert run(["train", "--config", cfg, "--seed", 12, "--data", data, "--out", out2]) == 0
    manifest2 = json.loads((out2 / "manifest.json").read_text())
    assert manifest2["config"]["seed"] == 12


def test_config_file_unknown_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_flag=1\n")
    assert run(["train", "--config", cfg, "--data", "x", "--out", "y"]) == 2


def test_entrypoint_subprocess_roundtrip(tmp_path):
    # exercise the installed console script end to end
    out = tmp_path / "d"
    proc = subprocess.run(
        [sys.executable, "-m", "semgan.cli", "gen-data", "--mode", "scene", "--n", "4",
         "--classes", "3", "--seed", "0", "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (out / "data.sdl").exists()


def test_manifest_reproducibility_fields(tmp_path):
    data = _make_data(tmp_path)
    out = tmp_path / "m"
    assert run(["train", "--data", data, "--out", out, "--seed", 4] + TINY_TRAIN) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["datasets"][str(data)]
    assert manifest["code_version_hash"]
    assert manifest["config"]["epochs"] == 2
