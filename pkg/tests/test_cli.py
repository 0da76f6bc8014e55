import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from spigan import cli, data, imaging
from spigan.pgm import read_pgm, write_pgm
from spigan.training import Checkpoint

TINY = """
out: {out}
dataset:
  source: synthetic
  count: 40
  split_ratio: 0.75
  seed: 3
train:
  sr: 0.1
  image_size: 16
  epochs: 2
  batch_size: 8
  gen_features: 8
  disc_features: [4, 8]
  disc_hidden: 16
  perceptual: false
  use_gan: true
  warmup_epochs_before_adversarial: 1
  seed: 0
"""


def tree_digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY.format(out=root / "run"))
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return cfg, root / "run"


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenes")
    assert cli.main(["make-synthetic", "--count", "5", "--size", "16", "--seed", "9", "--out", str(out)]) == 0
    return out


def test_train_artifacts(trained):
    _, run = trained
    names = {p.name for p in run.iterdir()}
    assert {"config.json", "checkpoint.pt", "train_log.jsonl", "mask_preview_sr0.1.pgm", "loss_curve.png", "val_report.json"} <= names
    echo = json.loads((run / "config.json").read_text())
    assert echo["train"]["sr"] == 0.1 and echo["dataset"]["count"] == 40
    preview = read_pgm(run / "mask_preview_sr0.1.pgm")
    assert set(np.unique(preview)) <= {0, 128, 255}
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 2


def test_train_is_byte_reproducible(trained, tmp_path):
    cfg, run = trained
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    first, second = tree_digest(run), tree_digest(tmp_path / "again")
    first.pop("config.json"), second.pop("config.json")  # echoes the output directory
    assert first == second


def test_flags_override_config(trained, tmp_path):
    cfg, _ = trained
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path), "--epochs", "1", "--sr", "0.25", "--no-gan"]) == 0
    echo = json.loads((tmp_path / "config.json").read_text())
    assert echo["train"]["sr"] == 0.25 and echo["train"]["epochs"] == 1 and echo["train"]["use_gan"] is False
    assert (tmp_path / "mask_preview_sr0.25.pgm").exists()


def test_invalid_sampling_rate(trained, tmp_path, capsys):
    cfg, _ = trained
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path), "--sr", "1.5"]) == 2
    assert "invalid sampling rate" in capsys.readouterr().err


def test_bad_config_inputs(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  bogus: 1\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "bogus" in capsys.readouterr().err
    assert cli.main(["nonsense"]) == 2


def test_nan_abort_exit_code(trained, tmp_path, monkeypatch):
    cfg, _ = trained
    from spigan import training

    real = training.Trainer.train_step_generator

    def poisoned(self, batch, adversarial=None):
        if self.epoch >= 2:
            raise training.NonFiniteLossError("forced")
        return real(self, batch, adversarial)

    monkeypatch.setattr(training.Trainer, "train_step_generator", poisoned)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    assert Checkpoint.load(tmp_path / "checkpoint_last_good.pt").epoch == 1
    assert not (tmp_path / "checkpoint.pt").exists()


def test_eval_report(trained, scene_dir, tmp_path, capsys):
    _, run = trained
    ck = str(run / "checkpoint.pt")
    assert cli.main(["eval", str(scene_dir), "--checkpoint", ck, "--out", str(tmp_path / "a")]) == 0
    table = capsys.readouterr().out
    assert "PSNR (dB)" in table and "SSIM" in table
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["aggregate"]["n_images"] == 5
    assert [r["id"] for r in report["per_image"]] == [f"img_{i:05d}" for i in range(5)]
    assert cli.main(["eval", str(scene_dir), "--checkpoint", ck, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_eval_errors(trained, tmp_path):
    _, run = trained
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["eval", str(empty), "--checkpoint", str(run / "checkpoint.pt"), "--out", str(tmp_path)]) == 2
    assert cli.main(["eval", str(empty), "--checkpoint", str(tmp_path / "nope.pt")]) == 2


def test_simulate_matches_eval(trained, scene_dir, tmp_path):
    _, run = trained
    ck = str(run / "checkpoint.pt")
    scene = scene_dir / "img_00002.pgm"
    assert cli.main(["simulate", str(scene), "--checkpoint", ck, "--out", str(tmp_path / "sim")]) == 0
    assert cli.main(["eval", str(scene_dir), "--checkpoint", ck, "--out", str(tmp_path / "ev")]) == 0
    sim = json.loads((tmp_path / "sim" / "metrics.json").read_text())
    ev = json.loads((tmp_path / "ev" / "report.json").read_text())
    row = next(r for r in ev["per_image"] if r["id"] == "img_00002")
    assert sim["psnr_db"] == row["psnr_db"] and sim["ssim"] == row["ssim"]
    meas = json.loads((tmp_path / "sim" / "measurements.json").read_text())
    assert len(meas["values"]) == meas["m"] == 25
    rec = read_pgm(tmp_path / "sim" / "reconstruction.pgm")
    assert rec.shape == (16, 16)
    first = tree_digest(tmp_path / "sim")
    assert cli.main(["simulate", str(scene), "--checkpoint", ck, "--out", str(tmp_path / "sim")]) == 0
    assert tree_digest(tmp_path / "sim") == first


def test_simulate_errors(trained, tmp_path):
    _, run = trained
    ck = str(run / "checkpoint.pt")
    assert cli.main(["simulate", str(tmp_path / "missing.pgm"), "--checkpoint", ck]) == 2
    big = tmp_path / "big.pgm"
    write_pgm(big, np.zeros((20, 20), dtype=np.uint8))
    assert cli.main(["simulate", str(big), "--checkpoint", ck, "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["simulate", str(big), "--checkpoint", ck, "--out", str(tmp_path / "o"), "--resize"]) == 0


def test_export_masks(trained, tmp_path):
    _, run = trained
    ck = Checkpoint.load(run / "checkpoint.pt")
    out = tmp_path / "masks"
    assert cli.main(["export-masks", "--checkpoint", str(run / "checkpoint.pt"), "--out", str(out)]) == 0
    pgms = sorted(out.glob("*.pgm"))
    assert len(pgms) == 2 * ck.config.m and (out / "manifest.json").exists()
    for p in pgms:
        assert set(np.unique(read_pgm(p))) <= {0, 255}
    back = imaging.import_masks(out)
    weights = ck.model().mask.weight.detach().numpy().astype(np.float64).reshape(-1, 16, 16)
    np.testing.assert_array_equal(back.masks, imaging.binarize(weights))
    first = tree_digest(out)
    assert cli.main(["export-masks", "--checkpoint", str(run / "checkpoint.pt"), "--out", str(out)]) == 0
    assert tree_digest(out) == first


def test_export_masks_unwritable(trained, tmp_path):
    _, run = trained
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["export-masks", "--checkpoint", str(run / "checkpoint.pt"), "--out", str(blocker / "sub")]) == 2
    assert cli.main(["export-masks", "--checkpoint", str(run / "checkpoint.pt")]) == 2


def test_make_synthetic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["make-synthetic", "--count", "500", "--size", "32", "--seed", "1", "--out", str(d)]) == 0
    files = sorted(a.glob("*.pgm"))
    assert len(files) == 500 and (a / "manifest.json").exists()
    assert tree_digest(a) == tree_digest(b)
    np.testing.assert_array_equal(read_pgm(files[0]), np.round(data.quantize8(data.synth_shapes(1, 32, 1))[0] * 255))


def test_make_synthetic_errors(tmp_path):
    assert cli.main(["make-synthetic", "--count", "0", "--out", str(tmp_path)]) == 2
    assert cli.main(["make-synthetic", "--count", "3"]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "spigan", "make-synthetic", "--count", "0", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2 and "error" in proc.stderr
