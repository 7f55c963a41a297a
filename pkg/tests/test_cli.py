import csv
import json
import os

import numpy as np
import pytest

from jbot import downstream
from jbot.checkpoint import load_params
from jbot.cli import main, run_splits
from jbot.jetdata import load_dataset

TINY = """\
seed: 3
data:
  synthetic_count: 60
  class_filter: [q, W, t]
network:
  d_model: 16
  n_heads: 2
  n_blocks: 1
distill:
  epochs: 2
  batch_size: 8
  warmup_epochs: 1
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "tiny.yaml"
    cfg.write_text(TINY)
    out = base / "run"
    assert main(["pretrain", str(cfg), "--out", str(out)]) == 0
    return out


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_pretrain_outputs(run_dir):
    for name in ("config.yaml", "splits.json", "metrics.csv", "student/manifest.json", "teacher/manifest.json"):
        assert os.path.exists(run_dir / name), name
    arrays, cfg, manifest = load_params(run_dir / "student")
    assert manifest["tag"] == "student" and cfg.feature_scale is not None
    assert all(os.path.exists(run_dir / "student" / f"{k}.npy") for k in arrays)
    train, val, test = run_splits(run_dir)
    assert set(train.labels.tolist()) == {0, 2, 4}
    assert len(train) + len(val) + len(test) == 60


def test_rerun_is_bit_identical(run_dir, tmp_path):
    out = tmp_path / "again"
    assert main(["pretrain", str(run_dir / "config.yaml"), "--out", str(out)]) == 0
    assert (out / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()
    for f in os.listdir(run_dir / "teacher"):
        assert (out / "teacher" / f).read_bytes() == (run_dir / "teacher" / f).read_bytes()


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("distill:\n  epoch: 3\n")
    assert main(["pretrain", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "line 2" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_missing_dataset_leaves_no_run_dir(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"data:\n  path: {tmp_path / 'nowhere'}\n")
    assert main(["pretrain", str(cfg), "--out", str(tmp_path / "run")]) == 2
    assert "not found" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_probe_matches_library(run_dir, tmp_path):
    out = tmp_path / "probe"
    assert main(["probe", "--run", str(run_dir), "--method", "knn", "--k", "5", "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    train, _, test = run_splits(run_dir)
    arrays, cfg, _ = load_params(run_dir / "student")
    tr = downstream.embed_dataset(train.features, train.labels, arrays, cfg)
    te = downstream.embed_dataset(test.features, test.labels, arrays, cfg)
    pred, _ = downstream.knn_probe(tr, te.vectors, 5, 5)
    assert metrics["accuracy"] == downstream.accuracy(pred, test.labels)
    np.testing.assert_array_equal(np.load(out / "embeddings.npy"), te.vectors)
    np.testing.assert_array_equal(np.load(out / "labels.npy"), test.labels)
    for c in ("q", "W", "t"):
        assert _rows(out / f"roc_{c}.csv")[0] == ["threshold", "eps_s", "eps_b"]


def test_finetune_and_evaluate(run_dir, tmp_path):
    out = tmp_path / "ft"
    args = ["finetune", "--run", str(run_dir), "--epochs", "1", "--llrd-grid", "0.7", "--lr-grid", "1e-3",
            "--out", str(out)]
    assert main(args) == 0
    assert "tokenizer" in (out / "lr_table.txt").read_text()
    assert len(_rows(out / "grid.csv")) == 2
    m = json.loads((out / "metrics.json").read_text())
    assert m["llrd_decay"] == 0.7 and 0 <= m["accuracy"] <= 1
    # evaluate re-derives the same metrics from saved scores
    scores = np.random.default_rng(0).dirichlet(np.ones(3), 20)
    labels = np.arange(20) % 3
    np.save(tmp_path / "s.npy", scores)
    np.save(tmp_path / "l.npy", labels)
    ev = tmp_path / "ev"
    assert main(["evaluate", "--scores", str(tmp_path / "s.npy"), "--labels", str(tmp_path / "l.npy"),
                 "--class-names", "a,b,c", "--out", str(ev)]) == 0
    got = json.loads((ev / "metrics.json").read_text())
    want, _ = downstream.classification_metrics(scores, labels, ["a", "b", "c"])
    assert got["auc"] == want["auc"]


def test_score_writes_four_files(run_dir, tmp_path):
    data = tmp_path / "test_set"
    assert main(["generate", "--out", str(data), "--count", "30", "--seed", "5", "--classes", "q,W,t"]) == 0
    out = tmp_path / "score"
    # the run's background is q+W+t; restrict the test set's background to make t the signal
    bg = tmp_path / "bg"
    assert main(["generate", "--out", str(bg), "--count", "40", "--seed", "6", "--classes", "q,W"]) == 0
    args = ["score", "--checkpoint", str(run_dir / "student"), "--checkpoint", str(run_dir / "teacher"),
            "--background", str(bg), "--test", str(data), "--k", "5", "--gmm-components", "2",
            "--select", "best", "--out", str(out)]
    assert main(args) == 0
    for m in ("knn", "cosine", "mahalanobis", "gmm"):
        rows = _rows(out / f"scores_{m}.csv")
        assert rows[0] == ["jet_id", "label", "score"] and len(rows) == 31
    report = json.loads((out / "anomaly_auc.json").read_text())
    assert set(report["knn"]["per_signal"]) == {"t"}
    assert len(report["candidates"]) == 2


def test_inspect(run_dir, tmp_path):
    data = tmp_path / "d"
    main(["generate", "--out", str(data), "--count", "5"])
    ds = load_dataset(data)
    out = tmp_path / "insp"
    assert main(["inspect", "augment", "--data", str(data), "--indices", "0,2", "--out", str(out)]) == 0
    rows = _rows(out / "augment_2.csv")
    assert rows[0] == ["view", "slot", "eta", "phi", "pt", "masked"]
    assert sum(r[0] == "input" for r in rows) == int(ds.features[2, :, 3].sum())
    assert main(["inspect", "attention", "--run", str(run_dir), "--data", str(data), "--indices", "1",
                 "--out", str(out)]) == 0
    rows = _rows(out / "attention_1.csv")
    assert rows[0][-2:] == ["head_0", "head_1"]
    assert main(["inspect", "project2d", "--run", str(run_dir), "--data", str(data), "--out", str(out)]) == 0
    assert len(_rows(out / "project2d.csv")) == 6
