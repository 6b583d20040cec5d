import csv
import json

import numpy as np
import pytest
import yaml

from qtune.cli import main
from qtune.data import write_image
from qtune.trainer import Checkpoint

TINY = {
    "dataset": {"num_classes": 4, "n": 60, "n_val": 20},
    "train": {
        "alternations": 1,
        "batch_size": 30,
        "lr_classifier": 0.01,
        "lr_kernels": 0.01,
        "classifier": {"base_width": 4, "blocks_per_group": 1, "groups": 2, "stem_stride": 2},
    },
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestTrain:
    def test_baseline(self, config, tmp_path):
        out = tmp_path / "b"
        assert run("train", "--config", config, "--mode", "baseline", "--quality", 50, "--out", out) == 0
        for name in ("config.yaml", "checkpoint.json", "history.csv", "rate.csv", "qtables.json", "summary.json"):
            assert (out / name).is_file(), name
        ckpt = Checkpoint.load(out / "checkpoint.json")
        assert ckpt.train_config().mode == "baseline"
        # quality 50 keeps the standard luma table, whose DC entry is 16
        assert json.loads((out / "qtables.json").read_text())["y_qtable"][0][0] == 16

    def test_alternating_flags(self, config, tmp_path):
        out = tmp_path / "a"
        assert run("train", "--config", config, "--lambda", 0.001, "--lambda1", 1, "--c", 10, "--out", out) == 0
        echoed = yaml.safe_load((out / "config.yaml").read_text())
        assert echoed["train"]["loss"] == {"lam": 0.001, "lam1": 1.0, "c": 10.0, "penalty_kind": "hinge_l1"}

    def test_same_seed_identical_history(self, config, tmp_path):
        for name in ("x", "y"):
            assert run("train", "--config", config, "--seed", 3, "--out", tmp_path / name) == 0
        assert (tmp_path / "x/history.csv").read_bytes() == (tmp_path / "y/history.csv").read_bytes()

    def test_rerun_from_echoed_config(self, config, tmp_path):
        assert run("train", "--config", config, "--seed", 2, "--out", tmp_path / "x") == 0
        assert run("train", "--config", tmp_path / "x/config.yaml", "--out", tmp_path / "y") == 0
        assert (tmp_path / "x/history.csv").read_bytes() == (tmp_path / "y/history.csv").read_bytes()

    def test_invalid_config_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"train": {"batch_size": 0}}))
        assert run("train", "--config", bad, "--out", tmp_path / "o") == 2
        assert "error" in capsys.readouterr().err

    def test_unreadable_dataset(self, tmp_path):
        assert run("train", "--dataset", tmp_path / "missing", "--out", tmp_path / "o") == 2


def test_sweep_rows(config, tmp_path):
    out = tmp_path / "s"
    doc = dict(TINY, sweep={"baselines": False})
    cfg = tmp_path / "sweep.yaml"
    cfg.write_text(yaml.safe_dump(doc))
    assert run("sweep", "--config", cfg, "--values", "1e-6,5", "--out", out) == 0
    rows = _rows(out / "sweep.csv")
    assert [float(r["lam"]) for r in rows] == [1e-6, 5.0]
    assert (out / "rate_accuracy.png").stat().st_size > 0


class TestRate:
    def test_quality_ordering(self, config, tmp_path):
        kb = {}
        for q in (100, 12.5):
            out = tmp_path / f"q{q}"
            assert run("rate", "--config", config, "--quality", q, "--out", out) == 0
            kb[q] = json.loads((out / "rate_summary.json").read_text())["mean_KB"]
        assert kb[100] > kb[12.5]

    def test_identical_reruns(self, config, tmp_path):
        for name in ("a", "b"):
            assert run("rate", "--config", config, "--quality", 50, "--out", tmp_path / name) == 0
        assert (tmp_path / "a/rate.csv").read_bytes() == (tmp_path / "b/rate.csv").read_bytes()

    def test_empty_corpus_rejected(self, tmp_path):
        cfg = tmp_path / "empty.yaml"
        cfg.write_text(yaml.safe_dump({"dataset": {"num_classes": 4, "n": 20, "n_val": 0}}))
        assert run("rate", "--config", cfg, "--quality", 50, "--out", tmp_path / "o") == 2

    def test_needs_kernel_source(self, config, tmp_path):
        assert run("rate", "--config", config, "--out", tmp_path / "o") == 2


class TestEncode:
    def test_output_count(self, tmp_path):
        src = tmp_path / "in"
        src.mkdir()
        rng = np.random.default_rng(0)
        for i in range(3):
            write_image(src / f"im{i}.png", rng.integers(0, 256, (16, 24, 3)))
        out = tmp_path / "o"
        assert run("encode", "--quality", 75, "--input", src, "--out", out) == 0
        assert len(list((out / "reconstructed").glob("*.png"))) == 3
        assert len(_rows(out / "encode.csv")) == 3

    def test_constant_image_unit_kernels(self, tmp_path):
        img = tmp_path / "gray.png"
        write_image(img, np.full((16, 16, 3), 90))
        qt = tmp_path / "ones.json"
        qt.write_text(json.dumps({f"{c}_qtable": [[1] * 8] * 8 for c in ("y", "cb", "cr")}))
        out = tmp_path / "o"
        assert run("encode", "--qtables", qt, "--input", img, "--out", out) == 0
        from qtune.data import read_image

        rec = read_image(out / "reconstructed" / "gray.png").astype(int)
        assert np.abs(rec - 90).max() <= 1

    def test_checkpoint_matches_evaluate(self, config, tmp_path):
        assert run("train", "--config", config, "--out", tmp_path / "t") == 0
        assert run("encode", "--config", config, "--checkpoint", tmp_path / "t/checkpoint.json", "--out", tmp_path / "e") == 0
        psnr = np.array([float(r["psnr"]) for r in _rows(tmp_path / "e/encode.csv")])
        summary = json.loads((tmp_path / "t/summary.json").read_text())
        assert np.mean(np.minimum(psnr, 100.0)) == pytest.approx(summary["psnr"], abs=1e-9)


class TestExport:
    def _ckpt(self, config, tmp_path, value):
        assert run("train", "--config", config, "--mode", "baseline", "--out", tmp_path / "t") == 0
        ckpt = Checkpoint.load(tmp_path / "t/checkpoint.json")
        ckpt.kernels = np.full((3, 8, 8), value)
        path = tmp_path / f"k{value}.json"
        ckpt.save(path)
        return path

    def test_all_ones(self, config, tmp_path, capsys):
        path = self._ckpt(config, tmp_path, 1.0)
        capsys.readouterr()
        assert run("export", "--checkpoint", path, "--out", tmp_path / "x") == 0
        doc = json.loads((tmp_path / "x/qtables.json").read_text())
        assert all(doc[f"{c}_qtable"] == [[1] * 8] * 8 for c in ("y", "cb", "cr"))
        assert capsys.readouterr().out.startswith("y_qtable\n  1   1")

    def test_tiny_kernels_saturate(self, config, tmp_path):
        path = self._ckpt(config, tmp_path, 1 / 1000)
        assert run("export", "--checkpoint", path, "--out", tmp_path / "x") == 0
        doc = json.loads((tmp_path / "x/qtables.json").read_text())
        assert doc["cr_qtable"] == [[255] * 8] * 8

    def test_missing_checkpoint(self, tmp_path):
        assert run("export", "--checkpoint", tmp_path / "nope.json", "--out", tmp_path / "x") == 2


def test_ingest_check(config, tmp_path):
    assert run("ingest-check", "--config", config, "--out", tmp_path / "i") == 0
    report = json.loads((tmp_path / "i/ingest.json").read_text())
    assert report["train"]["images"] == 60 and report["test"]["images"] == 20
    assert report["train"]["shape"] == [32, 32, 3]
