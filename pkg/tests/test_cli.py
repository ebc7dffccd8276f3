from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml

import triage
from triage import cli, pipeline
from triage.corpus import load_dataset, load_tree
from triage.evaluation import read_predictions

CONFIGS = Path(triage.__file__).parent / "configs"
DEMO = CONFIGS / "demo.yaml"


def _tiny(tmp_path, **over) -> Path:
    """The demo config cut down to a few seconds of work."""
    raw = yaml.safe_load(DEMO.read_text())
    raw["dataset"]["generator"]["n_tickets"] = 240
    raw["model"]["ecd"]["training"]["epochs"] = 2
    raw["hyperopt"]["budget"] = 1
    for key, value in over.items():
        raw[key] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_train_evaluate_predict(tmp_path):
    cfg = _tiny(tmp_path)
    out = tmp_path / "run"
    assert cli.run(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "model" / "weights.ckpt").exists() and (out / "history.json").exists()
    assert cli.run(["evaluate", "--config", str(cfg), "--out", str(out), "--top-k", "2"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["k"] == 2 and set(report["outputs"]) == {"contact_type", "reply_template"}
    assert 0.0 <= report["combined_accuracy"] <= 1.0
    preds = read_predictions(out / "predictions.jsonl")
    assert all(len(r) == 2 for r in preds["contact_type"].values())
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["steps"]) == {"train", "evaluate"}
    assert manifest["steps"]["evaluate"]["top_k"] == 2

    assert cli.run(["generate", "--config", str(cfg), "--out", str(tmp_path / "gen")]) == 0
    assert cli.run(["predict", "--config", str(cfg), "--out", str(out),
                    "--input", str(tmp_path / "gen" / "tickets.jsonl")]) == 0
    sugg = read_predictions(out / "suggestions.jsonl")
    assert len(sugg["reply_template"]) == 240
    assert (out / "predictions.jsonl").exists()  # evaluation dump left alone


@pytest.mark.parametrize("fmt, suffix", [("json-lines", "jsonl"), ("delimited", "csv")])
def test_generate_then_train_from_files(tmp_path, fmt, suffix):
    cfg = _tiny(tmp_path)
    gen = tmp_path / "gen"
    assert cli.run(["generate", "--config", str(cfg), "--out", str(gen), "--format", fmt]) == 0
    tree = load_tree(gen / "tree.json")
    data = load_dataset(gen / f"tickets.{suffix}", fmt, tree)
    assert len(data) == 240
    loaded = _tiny(tmp_path, dataset={"source": "load", "path": str(gen / f"tickets.{suffix}"), "format": fmt,
                                      "tree": str(gen / "tree.json"), "bank": str(gen / "bank.json"),
                                      "split": [0.7, 0.15, 0.15]})
    assert cli.run(["train", "--config", str(loaded), "--out", str(tmp_path / "run")]) == 0


def test_v1_family_runs(tmp_path):
    raw = yaml.safe_load((CONFIGS / "demo_v1.yaml").read_text())
    raw["dataset"]["generator"]["n_tickets"] = 300
    cfg = tmp_path / "v1.yaml"
    cfg.write_text(yaml.safe_dump(raw))
    out = tmp_path / "v1"
    assert cli.run(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert cli.run(["evaluate", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["outputs"]["contact_type"]["accuracy"] > 0.2


def test_hyperopt_budget_one(tmp_path):
    cfg = _tiny(tmp_path)
    out = tmp_path / "hp"
    assert cli.run(["hyperopt", "--config", str(cfg), "--out", str(out)]) == 0
    trials = json.loads((out / "hyperopt.json").read_text())
    assert len(trials) == 1 and (out / "trial_000" / "model").is_dir()
    assert set(trials[0]["params"]) == {"training.learning_rate", "output_features[0].fc_layers"}
    assert 0.001 <= trials[0]["params"]["training.learning_rate"] <= 0.01


def test_same_manifest_gives_identical_reports(tmp_path):
    cfg = _tiny(tmp_path)
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.run(["train", "--config", str(cfg), "--out", str(out)]) == 0
        assert cli.run(["evaluate", "--config", str(cfg), "--out", str(out)]) == 0
        reports.append(((out / "report.json").read_bytes(), (out / "predictions.jsonl").read_bytes(),
                        json.loads((out / "manifest.json").read_text())["config_hash"]))
    assert reports[0] == reports[1]


def test_seed_flag_changes_the_run(tmp_path):
    cfg = _tiny(tmp_path)
    for seed in ("1", "2"):
        assert cli.run(["generate", "--config", str(cfg), "--out", str(tmp_path / seed), "--seed", seed]) == 0
    a = (tmp_path / "1" / "tickets.jsonl").read_text()
    b = (tmp_path / "2" / "tickets.jsonl").read_text()
    assert a != b


def test_invalid_config_exit_code(tmp_path, capsys):
    raw = yaml.safe_load(DEMO.read_text())
    raw["model"]["ecd"]["input_features"][0]["encoder"] = "transformer"
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump(raw))
    assert cli.run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "model.ecd.input_features[0].encoder" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    [],
    ["train"],
    ["frobnicate", "--config", "x.yaml"],
    ["train", "--config", "does-not-exist.yaml"],
])
def test_usage_errors_exit_one(argv):
    assert cli.run(argv) == 1


def test_bad_top_k_is_a_usage_error(tmp_path):
    assert cli.run(["evaluate", "--config", str(_tiny(tmp_path)), "--top-k", "0"]) == 1


def test_missing_data_exit_code(tmp_path):
    cfg = _tiny(tmp_path, dataset={"source": "load", "path": str(tmp_path / "none.jsonl"),
                                   "tree": str(tmp_path / "t.json"), "bank": str(tmp_path / "b.json")})
    assert cli.run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_malformed_data_exit_code(tmp_path):
    cfg = _tiny(tmp_path)
    gen = tmp_path / "gen"
    assert cli.run(["generate", "--config", str(cfg), "--out", str(gen)]) == 0
    (gen / "tickets.jsonl").write_text('{"id": "T1", "message": "hi"}\n')
    bad = _tiny(tmp_path, dataset={"source": "load", "path": str(gen / "tickets.jsonl"),
                                   "tree": str(gen / "tree.json"), "bank": str(gen / "bank.json")})
    assert cli.run(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_evaluate_without_model_is_a_data_error(tmp_path):
    assert cli.run(["evaluate", "--config", str(_tiny(tmp_path)), "--out", str(tmp_path / "empty")]) == 2


def test_training_failure_exit_code(tmp_path, monkeypatch):
    def diverge(*a, **k):
        raise FloatingPointError("loss is not finite")

    monkeypatch.setattr(pipeline, "train", diverge)
    assert cli.run(["train", "--config", str(_tiny(tmp_path)), "--out", str(tmp_path / "o")]) == 3
