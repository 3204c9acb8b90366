import csv

import numpy as np
import pytest

from sttn.cli import main
from sttn.training.trainer import METRIC_FIELDS

from helpers import idx_bytes, write_fake_mnist

CONFIG = """\
architecture: lenet_t
mode: {mode}
epochs: 1
batch: 32
seed: 0
dataset:
  kind: mnist_idx
  path: {data}
output_dir: {out}
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = write_fake_mnist(root / "mnist")
    cfg = root / "run.yaml"
    cfg.write_text(CONFIG.format(mode="sttn_2_2", data=data, out=root / "run"))
    assert main(["train", "--config", str(cfg)]) == 0
    return root, data


class TestTrain:
    def test_outputs(self, trained):
        root, _ = trained
        assert (root / "run" / "best.ckpt").exists()
        with open(root / "run" / "metrics.csv") as f:
            rows = list(csv.DictReader(f))
        assert tuple(rows[0].keys()) == METRIC_FIELDS and len(rows) == 1

    def test_missing_dataset_path_names_key(self, tmp_path, capsys):
        cfg = tmp_path / "run.yaml"
        cfg.write_text(CONFIG.format(mode="sttn_2_2", data=tmp_path / "nope", out=tmp_path / "run"))
        assert main(["train", "--config", str(cfg)]) == 1
        assert "'dataset.path'" in capsys.readouterr().err

    def test_bad_config_reports_line(self, tmp_path, capsys):
        cfg = tmp_path / "run.yaml"
        cfg.write_text(CONFIG.format(mode="sttn_9_9", data=tmp_path, out=tmp_path / "run"))
        assert main(["train", "--config", str(cfg)]) == 1
        assert "line 2" in capsys.readouterr().err

    def test_train_without_config(self, capsys):
        assert main(["train"]) == 2


class TestExportEval:
    def test_export_then_eval(self, trained, capsys):
        root, data = trained
        ckpt, fused = root / "run" / "best.ckpt", root / "m.sttn"
        assert main(["export", "--checkpoint", str(ckpt), "--out", str(fused)]) == 0
        assert fused.exists()
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(fused), "--dataset", str(data)]) == 0
        fused_line = capsys.readouterr().out
        assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(data)]) == 0
        graph_line = capsys.readouterr().out
        assert fused_line.startswith("fused ternary accuracy")
        # identical counts: the fused model reproduces the training graph
        assert fused_line.split("(")[1] == graph_line.split("(")[1]

    def test_float_checkpoint_refuses_export(self, tmp_path, capsys):
        data = write_fake_mnist(tmp_path / "mnist", n_train=64, n_test=16)
        cfg = tmp_path / "run.yaml"
        cfg.write_text(CONFIG.format(mode="float", data=data, out=tmp_path / "run").replace("epochs: 1", "epochs: 0"))
        assert main(["train", "--config", str(cfg)]) == 0
        out = tmp_path / "f.sttn"
        assert main(["export", "--checkpoint", str(tmp_path / "run" / "best.ckpt"), "--out", str(out)]) == 1
        assert "nothing to fuse" in capsys.readouterr().err
        assert not out.exists()
        # a float checkpoint still evaluates through the training graph
        assert main(["eval", "--checkpoint", str(tmp_path / "run" / "best.ckpt"), "--dataset", str(data)]) == 0
        assert "float path" in capsys.readouterr().out

    def test_eval_wrong_dataset_shape(self, trained, tmp_path, capsys):
        root, _ = trained
        bad = tmp_path / "bad"
        bad.mkdir()
        for prefix in ("train", "t10k"):
            (bad / f"{prefix}-images-idx3-ubyte").write_bytes(idx_bytes(np.zeros((4, 14, 14)), 0x803))
            (bad / f"{prefix}-labels-idx1-ubyte").write_bytes(idx_bytes(np.zeros(4), 0x801))
        assert main(["eval", "--checkpoint", str(root / "run" / "best.ckpt"), "--dataset", str(bad)]) == 1
        assert "model expects" in capsys.readouterr().err

    def test_tampered_checkpoint(self, trained, tmp_path, capsys):
        root, _ = trained
        blob = bytearray((root / "run" / "best.ckpt").read_bytes())
        blob[-10] ^= 1
        (tmp_path / "t.ckpt").write_bytes(bytes(blob))
        assert main(["export", "--checkpoint", str(tmp_path / "t.ckpt"), "--out", str(tmp_path / "x")]) == 1
        assert "checksum" in capsys.readouterr().err


class TestAnalyzeBench:
    def test_analyze(self, trained, tmp_path, capsys):
        root, _ = trained
        assert main(["analyze", "--checkpoint", str(root / "run" / "best.ckpt"), "--out", str(tmp_path / "a")]) == 0
        out = capsys.readouterr().out
        assert "q0: sparsity=" in out
        for suffix in (".json", "_layers.csv", "_hist.csv"):
            assert (tmp_path / f"a{suffix}").exists()

    def test_bench_tiny(self, tmp_path):
        out = tmp_path / "b.csv"
        assert main(["bench", "--sizes", "2x70x3", "--repeats", "2", "--out", str(out)]) == 0
        with open(out) as f:
            rows = list(csv.DictReader(f))
        assert {r["path"] for r in rows} == {"packed", "naive_float", "blas_float"}
