"""Tests for the command-line interface."""

import csv
import os

import numpy as np
import pytest

from splathdr.cli import (EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION,
                          main, run_gradcheck)


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("scene")
    code = main(["gen-scene", "--seed", "4", "--gaussians", "8",
                 "--size", "12", "--views", "3", "--out-dir", str(path)])
    assert code == EXIT_OK
    return path


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, scene_dir):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "quick.cfg"
    cfg.write_text(
        "max_iterations = 6\n"
        "n_init = 10\n"
        "eval_interval = 0\n"
        "start_iter = 100\n")
    code = main(["train", "--scene", str(scene_dir), "--config", str(cfg),
                 "--out", str(out)])
    assert code == EXIT_OK
    return out


def test_gen_scene_writes_expected_files(scene_dir):
    names = sorted(os.listdir(scene_dir))
    assert "manifest.txt" in names
    assert sum(n.endswith(".ppm") for n in names) == 3 * 5
    assert sum(n.endswith(".pfm") for n in names) == 3


def test_gen_scene_is_idempotent(scene_dir, tmp_path):
    other = tmp_path / "again"
    main(["gen-scene", "--seed", "4", "--gaussians", "8", "--size", "12",
          "--views", "3", "--out-dir", str(other)])
    for name in os.listdir(scene_dir):
        a = (scene_dir / name).read_bytes()
        b = (other / name).read_bytes()
        assert a == b, name


def test_gen_scene_rejects_too_few_views(tmp_path, capsys):
    code = main(["gen-scene", "--views", "2", "--out-dir", str(tmp_path / "x")])
    assert code == EXIT_VALIDATION
    assert "at least 3" in capsys.readouterr().err


def test_train_writes_log_and_checkpoint(trained_dir):
    assert (trained_dir / "checkpoint.phgs").exists()
    with open(trained_dir / "train_log.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["iter", "rec", "cons", "unit", "total",
                       "psnr_ldr", "psnr_hdr"]
    assert len(rows) == 7


def test_train_rejects_unknown_config_key(scene_dir, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_knob = 1\n")
    code = main(["train", "--scene", str(scene_dir), "--config", str(cfg),
                 "--out", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION
    assert "not_a_knob" in capsys.readouterr().err


def test_train_missing_scene_is_io_error(tmp_path, capsys):
    code = main(["train", "--scene", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "out")])
    assert code == EXIT_IO


def test_eval_prints_table_and_means(trained_dir, scene_dir, capsys):
    code = main(["eval", "--checkpoint", str(trained_dir / "checkpoint.phgs"),
                 "--scene", str(scene_dir), "--split", "test"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "psnr_ldr" in out
    assert "mean LDR-OE PSNR" in out
    assert "mean LDR-NE PSNR" in out
    assert "mean mu-law HDR PSNR" in out
    # an untrained-ish checkpoint still evaluates to finite numbers
    assert "nan" not in out
    assert "inf" not in out


def test_eval_missing_checkpoint_is_io_error(scene_dir, tmp_path):
    code = main(["eval", "--checkpoint", str(tmp_path / "missing.phgs"),
                 "--scene", str(scene_dir)])
    assert code == EXIT_IO


def test_render_ldr_mode(trained_dir, scene_dir, tmp_path):
    out = tmp_path / "render"
    code = main(["render", "--checkpoint", str(trained_dir / "checkpoint.phgs"),
                 "--scene", str(scene_dir), "--view", "0",
                 "--exposure", "1.0", "--mode", "ldr", "--out-dir", str(out)])
    assert code == EXIT_OK
    assert sorted(os.listdir(out)) == ["i_ldr.ppm"]


def test_render_branches_mode_writes_all_intermediates(trained_dir, scene_dir,
                                                       tmp_path):
    out = tmp_path / "branches"
    code = main(["render", "--checkpoint", str(trained_dir / "checkpoint.phgs"),
                 "--scene", str(scene_dir), "--view", "1",
                 "--exposure", "4.0", "--mode", "branches",
                 "--out-dir", str(out)])
    assert code == EXIT_OK
    names = sorted(os.listdir(out))
    assert names == sorted([
        "i_hdr.pfm", "i_hdr_scaled.pfm", "i_hdr_relit.pfm",
        "i_glo.ppm", "i_loc.ppm", "i_glo_hat.ppm", "i_loc_hat.ppm",
        "i_ig.ppm", "i_gi.ppm", "i_ldr.ppm"])


def test_render_unknown_view_is_validation_error(trained_dir, scene_dir,
                                                 tmp_path, capsys):
    code = main(["render", "--checkpoint", str(trained_dir / "checkpoint.phgs"),
                 "--scene", str(scene_dir), "--view", "99",
                 "--out-dir", str(tmp_path / "x")])
    assert code == EXIT_VALIDATION


def test_gradcheck_subset_passes_quickly():
    err, worst = run_gradcheck(seed=0, param_filter="phi,f_mix", step=1e-5)
    assert err < 1e-4, worst


def test_gradcheck_detects_injected_fault():
    err, _ = run_gradcheck(seed=0, param_filter="cloud.h_r", step=1e-5,
                           inject_fault=True)
    assert err > 1e-3


def test_gradcheck_cli_exit_codes(capsys):
    code = main(["gradcheck", "--params", "phi"])
    assert code == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    code = main(["gradcheck", "--params", "cloud.h_r", "--inject-vjp-fault"])
    assert code == EXIT_NUMERICAL


def test_gradcheck_rejects_unknown_prefix(capsys):
    code = main(["gradcheck", "--params", "bogus_prefix"])
    assert code == EXIT_VALIDATION


def test_densify_stats_writes_csv(trained_dir, scene_dir, tmp_path):
    out_csv = tmp_path / "stats.csv"
    code = main(["densify-stats",
                 "--checkpoint", str(trained_dir / "checkpoint.phgs"),
                 "--scene", str(scene_dir), "--out-csv", str(out_csv)])
    assert code == EXIT_OK
    with open(out_csv) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["index", "avg_grad", "deviation", "s_a", "densified"]
    assert len(rows) > 1
    grads = np.array([float(r[1]) for r in rows[1:]])
    assert np.all(np.isfinite(grads))
    assert grads.max() > 0
