"""End-to-end command-line behavior: file outputs, config layering and the
exit-code contract (0 ok, 2 config, 3 data, 4 numerical)."""

import csv

import numpy as np
import pytest

from conftest import hadamard_matrix_reference
from vhunet.cli import main, parse_config_file
from vhunet.container import read_vhut, write_vhut
from vhunet.model import VhuNet, VhuNetConfig


def run(*argv):
    return main([str(a) for a in argv])


def simulate_small(out_dir, n=2, seed=0, extra=()):
    return run("simulate", "--out", out_dir, "--n", n, "--height", 16,
               "--width", 16, "--regions", 2, "--order", 2, "--seed", seed,
               *extra)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- simulate ---------------------------------------------------------------------


def test_simulate_writes_phantoms_manifest_and_echo(tmp_path):
    out = tmp_path / "data"
    assert simulate_small(out) == 0
    rows = read_rows(out / "manifest.csv")
    assert rows[0] == ["name", "file", "seed"]
    assert [r[0] for r in rows[1:]] == ["phantom_0000", "phantom_0001"]
    tensors = read_vhut(out / "phantom_0000.vhut")
    assert set(tensors) == {"clean", "bias", "corrupted", "labels", "noise_sigma"}
    assert tensors["clean"].shape == (1, 16, 16)
    assert np.allclose(tensors["corrupted"], tensors["clean"] * tensors["bias"])
    echoed = parse_config_file(out / "simulate_config.txt")
    assert echoed["n"] == "2" and echoed["regions"] == "2"
    assert echoed["pgm"] == "false"


def test_simulate_is_reproducible_from_its_echo(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert simulate_small(a) == 0
    assert run("simulate", "--config", a / "simulate_config.txt", "--out", b) == 0
    for name in ("phantom_0000.vhut", "phantom_0001.vhut"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_simulate_pgm_previews(tmp_path):
    out = tmp_path / "data"
    assert simulate_small(out, n=1, extra=["--pgm"]) == 0
    for suffix in ("clean", "corrupted", "bias"):
        blob = (out / f"phantom_0000_{suffix}.pgm").read_bytes()
        assert blob.startswith(b"P5\n16 16\n65535\n")
        assert len(blob) == len(b"P5\n16 16\n65535\n") + 2 * 16 * 16


def test_config_file_layering_flag_wins(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("n = 3  # comment\nseed = 9\nheight = 16\nwidth = 16\nregions = 2\n")
    out = tmp_path / "data"
    assert run("simulate", "--config", cfg, "--out", out, "--n", 2) == 0
    echoed = parse_config_file(out / "simulate_config.txt")
    assert echoed["n"] == "2" and echoed["seed"] == "9"


def test_config_errors_exit_2(tmp_path, capsys):
    assert run("simulate", "--n", 1) == 2  # missing required out
    bad = tmp_path / "bad.cfg"
    bad.write_text("volume = 3\n")
    assert run("simulate", "--config", bad, "--out", tmp_path / "x") == 2
    bad.write_text("just some words\n")
    assert run("simulate", "--config", bad, "--out", tmp_path / "x") == 2
    assert run("simulate", "--config", tmp_path / "nope.cfg", "--out", tmp_path / "x") == 2
    assert run("simulate", "--out", tmp_path / "x", "--n", "many") == 2
    assert "config error" in capsys.readouterr().err


# -- train ------------------------------------------------------------------------


def test_train_zero_epochs_saves_the_initial_model(tmp_path, capsys):
    data, out = tmp_path / "data", tmp_path / "run"
    simulate_small(data, n=3)
    assert run("train", "--data", data, "--out", out, "--epochs", 0) == 0
    assert read_rows(out / "training_log.csv") == [
        ["epoch", "mse", "kl", "smooth", "total", "wall_seconds"]]
    model = VhuNet.load(out / "checkpoint.vhut")
    cfg = VhuNetConfig.preset("desk")
    cfg.height = cfg.width = 16
    fresh = VhuNet(cfg, seed=0)
    for name, p in fresh.named_parameters().items():
        assert np.array_equal(p.data, model.named_parameters()[name].data)
    echoed = parse_config_file(out / "train_config.txt")
    assert echoed["epochs"] == "0" and echoed["preset"] == "desk"
    assert "67497 parameters" not in capsys.readouterr().out  # 16x16 model is smaller


def test_train_one_epoch_logs_and_reports(tmp_path, capsys):
    data, out = tmp_path / "data", tmp_path / "run"
    simulate_small(data, n=4)
    assert run("train", "--data", data, "--out", out, "--epochs", 1,
               "--kl-weight", 0, "--batch-size", 2) == 0
    rows = read_rows(out / "training_log.csv")
    assert len(rows) == 2 and len(rows[1]) == 6
    assert rows[1][0] == "1" and float(rows[1][4]) > 0
    text = capsys.readouterr().out
    assert "epoch    1" in text and "checkpoint:" in text


def test_train_rejects_bogus_kl_direction(tmp_path):
    data = tmp_path / "data"
    simulate_small(data, n=1)
    assert run("train", "--data", data, "--out", tmp_path / "r",
               "--reverse-kl", "sideways") == 2


def test_train_on_non_finite_data_exits_4(tmp_path, capsys):
    data = tmp_path / "data"
    data.mkdir()
    corrupted = np.ones((1, 16, 16))
    corrupted[0, 3, 3] = np.nan
    write_vhut(data / "bad.vhut", {"clean": np.ones((1, 16, 16)),
                                   "bias": np.ones((1, 16, 16)),
                                   "corrupted": corrupted})
    (data / "manifest.csv").write_text("name,file,seed\nbad,bad.vhut,0\n")
    assert run("train", "--data", data, "--out", tmp_path / "r", "--epochs", 1) == 4
    assert "numerical failure" in capsys.readouterr().err


def test_missing_manifest_exits_2_and_bad_manifest_exits_3(tmp_path):
    assert run("train", "--data", tmp_path / "ghost", "--out", tmp_path / "r") == 2
    data = tmp_path / "data"
    data.mkdir()
    (data / "manifest.csv").write_text("foo,bar\nx,y\n")
    assert run("train", "--data", data, "--out", tmp_path / "r") == 3


# -- correct ----------------------------------------------------------------------


def identity_checkpoint(tmp_path, extent=16):
    cfg = VhuNetConfig.preset("desk")
    cfg.height = cfg.width = extent
    model = VhuNet(cfg, seed=0)
    path = tmp_path / "ck.vhut"
    model.save(path)
    return path


def test_correct_with_untrained_model_returns_inputs(tmp_path):
    data, out = tmp_path / "data", tmp_path / "corr"
    simulate_small(data, n=3)
    ck = identity_checkpoint(tmp_path)
    assert run("correct", "--checkpoint", ck, "--data", data, "--out", out) == 0
    for i in range(3):
        name = f"phantom_{i:04d}"
        pred = read_vhut(out / f"{name}_corrected.vhut")
        source = read_vhut(data / f"{name}.vhut")
        assert np.array_equal(pred["field"], np.ones((1, 16, 16)))
        assert np.max(np.abs(pred["corrected"] - source["corrupted"])) <= 1e-12


def test_correct_accepts_loose_containers_and_2d_images(tmp_path, rng):
    ck = identity_checkpoint(tmp_path)
    img = rng.uniform(1.0, 2.0, size=(16, 16))
    write_vhut(tmp_path / "loose.vhut", {"anything": img})
    write_vhut(tmp_path / "named.vhut", {"image": img, "other": np.zeros(3)})
    out = tmp_path / "corr"
    assert run("correct", "--checkpoint", ck, "--out", out, "--inputs",
               f"{tmp_path / 'loose.vhut'},{tmp_path / 'named.vhut'}") == 0
    for stem in ("loose", "named"):
        pred = read_vhut(out / f"{stem}_corrected.vhut")
        assert pred["corrected"].shape == (1, 16, 16)
        assert np.max(np.abs(pred["corrected"][0] - img)) <= 1e-12


def test_correct_partial_failure_exits_3_but_keeps_good_outputs(tmp_path, rng, capsys):
    ck = identity_checkpoint(tmp_path)
    write_vhut(tmp_path / "good.vhut", {"image": rng.uniform(size=(16, 16))})
    write_vhut(tmp_path / "flat.vhut", {"image": np.full((16, 16), 5.0)})
    out = tmp_path / "corr"
    code = run("correct", "--checkpoint", ck, "--out", out, "--inputs",
               f"{tmp_path / 'good.vhut'},{tmp_path / 'flat.vhut'}")
    assert code == 3
    assert (out / "good_corrected.vhut").exists()
    assert not (out / "flat_corrected.vhut").exists()
    err = capsys.readouterr().err
    assert "flat" in err and "1 of 2 inputs failed" in err


def test_correct_requires_existing_checkpoint_and_some_input(tmp_path):
    assert run("correct", "--checkpoint", tmp_path / "no.vhut",
               "--out", tmp_path / "o", "--inputs", "x.vhut") == 2
    ck = identity_checkpoint(tmp_path)
    assert run("correct", "--checkpoint", ck, "--out", tmp_path / "o") == 2


# -- evaluate ---------------------------------------------------------------------


def test_evaluate_perfect_predictions(tmp_path):
    data, pred, out = tmp_path / "data", tmp_path / "pred", tmp_path / "ev"
    simulate_small(data, n=2)
    pred.mkdir()
    for i in range(2):
        name = f"phantom_{i:04d}"
        tensors = read_vhut(data / f"{name}.vhut")
        write_vhut(pred / f"{name}_corrected.vhut",
                   {"corrected": tensors["clean"], "field": 1.0 / tensors["bias"]})
    assert run("evaluate", "--data", data, "--predictions", pred, "--out", out) == 0
    rows = read_rows(out / "metrics.csv")
    assert rows[0] == ["name", "cv", "snr", "cnr", "ssim", "psnr", "coco"]
    assert [r[0] for r in rows[1:]] == ["phantom_0000", "phantom_0001", "mean", "std"]
    for row in rows[1:3]:
        cells = dict(zip(rows[0], row))
        assert float(cells["cv"]) <= 1e-12        # piecewise-constant regions
        # background std is 0 up to summation rounding: huge dB, maybe inf
        assert float(cells["snr"]) > 100.0
        assert float(cells["cnr"]) > 1e6
        assert float(cells["ssim"]) == 1.0
        assert cells["psnr"] == "inf"
        assert abs(float(cells["coco"]) - 1.0) <= 1e-12
    agg = dict(zip(rows[0], rows[3]))
    assert float(agg["ssim"]) == 1.0 and float(agg["cv"]) <= 1e-12


def test_evaluate_empty_manifest_writes_header_only(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    (data / "manifest.csv").write_text("name,file,seed\n")
    pred = tmp_path / "pred"
    pred.mkdir()
    out = tmp_path / "ev"
    assert run("evaluate", "--data", data, "--predictions", pred, "--out", out) == 0
    assert read_rows(out / "metrics.csv") == [["name", "cv", "snr", "cnr",
                                               "ssim", "psnr", "coco"]]


def test_evaluate_missing_prediction_exits_3(tmp_path):
    data = tmp_path / "data"
    simulate_small(data, n=1)
    pred = tmp_path / "pred"
    pred.mkdir()
    assert run("evaluate", "--data", data, "--predictions", pred,
               "--out", tmp_path / "ev") == 3
    assert run("evaluate", "--data", data, "--predictions", tmp_path / "ghost",
               "--out", tmp_path / "ev") == 2


# -- fwht -------------------------------------------------------------------------


def test_fwht_round_trip_and_1d_reference(tmp_path, rng):
    x = rng.normal(size=(4, 8))
    v = rng.normal(size=16)
    write_vhut(tmp_path / "in.vhut", {"x": x, "v": v})
    assert run("fwht", "--input", tmp_path / "in.vhut", "--out", tmp_path / "f.vhut") == 0
    fwd = read_vhut(tmp_path / "f.vhut")
    assert np.max(np.abs(fwd["v"] - hadamard_matrix_reference(16) @ v)) <= 1e-10
    assert run("fwht", "--input", tmp_path / "f.vhut", "--out", tmp_path / "b.vhut",
               "--inverse") == 0
    back = read_vhut(tmp_path / "b.vhut")
    assert np.max(np.abs(back["x"] - x)) <= 1e-12
    assert np.max(np.abs(back["v"] - v)) <= 1e-12


def test_fwht_rejects_bad_mode_and_rank(tmp_path, rng):
    write_vhut(tmp_path / "v.vhut", {"v": rng.normal(size=8)})
    assert run("fwht", "--input", tmp_path / "v.vhut", "--out", tmp_path / "o.vhut",
               "--mode", "3d") == 2
    assert run("fwht", "--input", tmp_path / "v.vhut", "--out", tmp_path / "o.vhut",
               "--mode", "2d") == 3
    assert run("fwht", "--input", tmp_path / "ghost.vhut",
               "--out", tmp_path / "o.vhut") == 2
