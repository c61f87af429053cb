"""CLI integration: every subcommand, exit codes, duration parsing, and
environment overrides."""
import json
import os

import numpy as np
import pytest

from icssm.cli import main, parse_duration
from icssm.data import DataValidationError


def _sim_config(tmp_path, posts=6):
    cfg = {
        "opinions": [
            {"name": "a", "mu_per_hour": [6, 2, 2, 1], "alpha_br": 0.4,
             "beta_per_hour": 1.2, "phrases": ["alpha topic"]},
            {"name": "b", "mu_per_hour": [3, 1, 1, 1], "alpha_br": 0.1,
             "beta_per_hour": 0.9, "phrases": ["beta topic"]},
        ],
        "posts_per_opinion": posts,
        "n_users": 10,
        "posting_span": 2 * 86400,
    }
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(cfg))
    return path


def _train_config(tmp_path):
    cfg = {"model": {"d_emb": 12, "d_model": 12, "n_state": 3, "n_blocks": 2},
           "training": {"epochs": 2, "batch_size": 8,
                        "optimizer": {"lr": 0.003, "warmup_steps": 3}}}
    path = tmp_path / "train.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A dataset, split, and pretrained checkpoint shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    sim = _sim_config(root)
    train = _train_config(root)
    data = root / "data.jsonl"
    assert main(["simulate", "--config", str(sim), "--seed", "3",
                 "--out", str(data)]) == 0
    splits = root / "splits"
    assert main(["split", "--in", str(data), "--out-dir", str(splits)]) == 0
    ckpt = root / "model.ckpt"
    assert main(["pretrain", "--data", str(splits), "--config", str(train),
                 "--out", str(ckpt)]) == 0
    return {"root": root, "data": data, "splits": splits, "ckpt": ckpt,
            "train": train}


def test_parse_duration():
    assert parse_duration("30s") == 30
    assert parse_duration("5m") == 300
    assert parse_duration("6h") == 21600
    assert parse_duration("28d") == 28 * 86400
    for bad in ("6", "h6", "1.5h", "6 hours", ""):
        with pytest.raises(DataValidationError):
            parse_duration(bad)


def test_simulate_writes_manifest(workspace):
    assert workspace["data"].exists()
    manifest = workspace["data"].with_suffix(".manifest.json")
    assert manifest.exists()


def test_split_outputs(workspace):
    for name in ("train", "val", "test"):
        assert (workspace["splits"] / f"{name}.jsonl").exists()


def test_train_subcommand(workspace, capsys):
    out = workspace["root"] / "cls.ckpt"
    code = main(["train", "--task", "classify", "--data",
                 str(workspace["splits"]), "--from", str(workspace["ckpt"]),
                 "--config", str(workspace["train"]), "--out", str(out)])
    assert code == 0
    assert out.exists()
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert lines[-1]["task"] == "classify"


def test_predict_subcommand(workspace):
    first = json.loads(workspace["data"].read_text().splitlines()[0])
    out = workspace["root"] / "pred.jsonl"
    code = main(["predict", "--model", str(workspace["ckpt"]), "--data",
                 str(workspace["data"]), "--post-id", first["post_id"],
                 "--tau-obs", "6h", "--horizon", "4h", "--step", "30m",
                 "--out", str(out)])
    assert code == 0
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(rows) == 8
    assert all(v >= 0 for r in rows for v in r["e_hat"].values())


def test_predict_unknown_post_exits_2(workspace, capsys):
    code = main(["predict", "--model", str(workspace["ckpt"]), "--data",
                 str(workspace["data"]), "--post-id", "nope"])
    assert code == 2


def test_evaluate_overall(workspace, capsys):
    code = main(["evaluate", "--mode", "overall", "--model",
                 str(workspace["ckpt"]), "--data",
                 str(workspace["splits"] / "test.jsonl")])
    assert code == 0
    row = json.loads(capsys.readouterr().out.splitlines()[0])
    assert {"rmse", "mape", "r2", "per_channel"} <= set(row)


def test_evaluate_early(workspace, capsys):
    code = main(["evaluate", "--mode", "early", "--model",
                 str(workspace["ckpt"]), "--data", str(workspace["data"])])
    assert code == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert len(rows) == 10


def test_evaluate_staged(workspace, capsys):
    code = main(["evaluate", "--mode", "staged", "--model",
                 str(workspace["ckpt"]), "--data", str(workspace["data"])])
    assert code == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [r["stage"] for r in rows] == ["fixed6h", "early", "mid", "late"]


def test_evaluate_dynamic(workspace, capsys):
    code = main(["evaluate", "--mode", "dynamic", "--model",
                 str(workspace["ckpt"]), "--data", str(workspace["data"]),
                 "--windows", "1", "--horizon", "2d", "--step", "1h"])
    assert code == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert rows and all(r["window_days"] == 1 for r in rows)
    assert all(0 <= r["coverage"] <= 1 for r in rows)


def test_insights(workspace, capsys):
    code = main(["insights", "--in", str(workspace["data"])])
    assert code == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [r["channel"] for r in rows] == ["likes", "shares", "comments",
                                            "emojis"]
    for row in rows:
        if row["eccdf"]:
            assert row["eccdf"][0][1] == 1.0  # P(X >= min) is 1


def test_missing_input_exits_2(tmp_path, capsys):
    assert main(["split", "--in", str(tmp_path / "absent.jsonl"),
                 "--out-dir", str(tmp_path / "o")]) == 2


def test_invalid_data_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"post_id": "p"}\n')
    assert main(["insights", "--in", str(bad)]) == 2


def test_corrupt_checkpoint_exits_2(tmp_path, workspace, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    assert main(["evaluate", "--mode", "overall", "--model", str(bad),
                 "--data", str(workspace["data"])]) == 2


def test_seed_env_override(tmp_path, capsys, monkeypatch):
    sim = _sim_config(tmp_path, posts=3)
    out1, out2, out3 = (tmp_path / f"d{i}.jsonl" for i in range(3))
    monkeypatch.setenv("ICSSM_SEED", "99")
    assert main(["simulate", "--config", str(sim), "--seed", "1",
                 "--out", str(out1)]) == 0
    assert main(["simulate", "--config", str(sim), "--seed", "2",
                 "--out", str(out2)]) == 0
    monkeypatch.delenv("ICSSM_SEED")
    assert main(["simulate", "--config", str(sim), "--seed", "1",
                 "--out", str(out3)]) == 0
    assert out1.read_text() == out2.read_text()     # env pins the seed
    assert out1.read_text() != out3.read_text()


def test_deterministic_pretrain_checkpoints(workspace, tmp_path):
    # same data, config, and seed -> byte-identical checkpoints
    out = tmp_path / "again.ckpt"
    assert main(["pretrain", "--data", str(workspace["splits"]),
                 "--config", str(workspace["train"]),
                 "--out", str(out)]) == 0
    assert out.read_bytes() == workspace["ckpt"].read_bytes()
