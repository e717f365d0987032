import json

import pandas as pd
import pytest

from main import main

TINY_FLAGS = [
    "--d-model", "8",
    "--ffn-dim", "16",
    "--heads", "2",
    "--entity-layers", "1",
    "--context-layers", "1",
    "--batch-size", "32",
    "--neighbor-cap", "4",
    "--progress", "false",
]


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "run"
    assert main(["gen-synthetic", str(data), "--entities", "30", "--relations", "3", "--seed", "1"]) == 0
    code = main(
        ["train", "--dataset-dir", str(data), "--output-dir", str(out), "--max-epochs", "1", "--set", "seed=2"]
        + TINY_FLAGS
    )
    assert code == 0
    return data, out


def test_train_writes_artifacts(trained_run):
    _, out = trained_run
    ledger = pd.read_csv(out / "ledger.csv")
    assert len(ledger) == 1
    assert ledger.loc[0, "epoch"] == 1
    assert (out / "best.ckpt").exists()
    config = json.loads((out / "config.json").read_text(encoding="utf-8"))
    assert config["max_epochs"] == 1
    assert config["seed"] == 2
    assert config["d_model"] == 8


def test_train_keeps_a_run_log(trained_run):
    _, out = trained_run
    text = (out / "train.log").read_text(encoding="utf-8")
    assert "trainer - INFO - Epoch 1: loss" in text


def test_eval_is_repeatable(trained_run, capsys):
    _, out = trained_run
    capsys.readouterr()
    assert main(["eval", str(out / "best.ckpt"), "--split", "test"]) == 0
    first = capsys.readouterr().out
    assert main(["eval", str(out / "best.ckpt"), "--split", "test"]) == 0
    second = capsys.readouterr().out
    assert first == second
    report = json.loads(first)
    assert report["count"] > 0
    assert 0.0 < report["mrr"] <= 1.0
    assert (out / "test_ranks.csv").exists()


def test_analyze_reads_eval_outputs(trained_run, tmp_path):
    data, out = trained_run
    assert main(["eval", str(out / "best.ckpt")]) == 0
    hops_csv = tmp_path / "hops.csv"
    assert main(["analyze", "hops", str(out / "test_ranks.csv"), "--dataset-dir", str(data), "--output", str(hops_csv)]) == 0
    hops = pd.read_csv(hops_csv)
    assert list(hops.columns) == ["key", "count", "mrr", "triples"]
    assert hops["count"].sum() == len(pd.read_csv(out / "test_ranks.csv"))

    nearest_csv = tmp_path / "nearest.csv"
    assert main(["analyze", "nearest", str(out / "best.ckpt"), "--first", "2", "--k", "3", "--output", str(nearest_csv)]) == 0
    assert len(pd.read_csv(nearest_csv)) == 6


def test_stats(trained_run, capsys):
    data, _ = trained_run
    capsys.readouterr()
    assert main(["stats", str(data), "--cap", "4"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["entities"] == 30
    assert stats["relations"] == 3
    assert "4" in stats["neighborhood_coverage"]


def test_unknown_config_key_fails(tmp_path):
    assert main(["train", "--dataset-dir", str(tmp_path), "--set", "bogus=1"]) == 1


def test_missing_checkpoint_fails(tmp_path):
    assert main(["eval", str(tmp_path / "absent.ckpt")]) == 1


def test_missing_dataset_fails(tmp_path):
    assert main(["train", "--dataset-dir", str(tmp_path / "absent")]) == 1


def test_bad_synthetic_request_fails(tmp_path):
    assert main(["gen-synthetic", str(tmp_path), "--entities", "1"]) == 1


if __name__ == "__main__":
    pytest.main([__file__])
