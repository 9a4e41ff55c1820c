import json
from pathlib import Path

import numpy as np
import pytest

from mddllm.cli import main
from mddllm.metrics import ScoredSet, auc_oracle

FIXTURES = Path(__file__).parent / "fixtures"


def test_synth_writes_requested_rows(tmp_path):
    out = tmp_path / "c.csv"
    assert main(["synth", "--n", "1000", "--preset", "strong-signal", "--seed", "7", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 1001


def test_synth_same_seed_same_bytes(tmp_path):
    for name in ("a.csv", "b.csv"):
        main(["synth", "--n", "200", "--seed", "3", "--out", str(tmp_path / name)])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_bogus_flag_is_usage_error(tmp_path, capsys):
    out = tmp_path / "model"
    assert main(["train", "--bogus-flag", "--out", str(out)]) == 2
    assert "bogus" in capsys.readouterr().err
    assert not out.exists() and not list(tmp_path.iterdir())


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 2


def test_runtime_failure_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("patient_id,shoe_size,mdd\na,42,1\n")
    assert main(["ingest", "--cohort", str(bad), "--out", str(tmp_path / "o.csv")]) == 1
    assert "shoe_size" in capsys.readouterr().err


def test_eval_matches_golden(tmp_path):
    assert main(["eval", "--scores", str(FIXTURES / "scores.csv"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "report.txt").read_text() == (FIXTURES / "golden_report.txt").read_text()
    assert json.loads((tmp_path / "rep" / "report.json").read_text()) == \
        json.loads((FIXTURES / "golden_report.json").read_text())


def test_golden_agrees_with_oracles():
    scored = ScoredSet.from_csv((FIXTURES / "scores.csv").read_text())
    golden = json.loads((FIXTURES / "golden_report.json").read_text())
    s, y = scored.scores, scored.labels
    assert golden["auc"] == pytest.approx(auc_oracle(s, y), abs=1e-12)
    tp, fp = int(((s >= 0.5) & (y == 1)).sum()), int(((s >= 0.5) & (y == 0)).sum())
    tn, fn = int(((s < 0.5) & (y == 0)).sum()), int(((s < 0.5) & (y == 1)).sum())
    assert golden["acc"] == pytest.approx((tp + tn) / len(y))
    assert golden["f1"] == pytest.approx(2 * tp / (2 * tp + fp + fn))
    assert golden["npv"] == pytest.approx(tn / (tn + fn))


def test_report_renders_json(tmp_path, capsys):
    assert main(["report", "--input", str(FIXTURES / "golden_report.json")]) == 0
    assert capsys.readouterr().out == (FIXTURES / "golden_report.txt").read_text()


def test_corpus_and_export(tmp_path):
    cohort = tmp_path / "c.csv"
    main(["synth", "--n", "120", "--seed", "1", "--out", str(cohort)])
    assert main(["corpus", "--cohort", str(cohort), "--template", "list", "--split", "all",
                 "--out", str(tmp_path / "c.jsonl")]) == 0
    rows = [json.loads(line) for line in (tmp_path / "c.jsonl").read_text().splitlines()]
    assert len(rows) == 120 and rows[0]["output"] in {"Yes", "No"}
    assert main(["export-features", "--cohort", str(cohort), "--ids", "--out", str(tmp_path / "x.csv")]) == 0
    header = (tmp_path / "x.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "patient_id" and header[-1] == "label"


def test_config_file_and_flag_precedence(tmp_path):
    from mddllm.cli import _experiment_config, build_parser
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 700, "epochs": 2, "template": "list"}))
    args = build_parser().parse_args(["experiment", "--config", str(cfg), "--epochs", "3", "--seed", "5",
                                      "--out", str(tmp_path)])
    config = _experiment_config(args)
    assert (config.n, config.epochs, config.template) == (700, 3, "list")
    assert config.seeds[0] == 5


def test_train_and_classify_round_trip(tmp_path):
    cohort = tmp_path / "c.csv"
    main(["synth", "--n", "300", "--seed", "2", "--out", str(cohort)])
    small = ["--d-model", "16", "--n-layer", "1", "--n-head", "2", "--d-mlp", "32", "--epochs", "1",
             "--pretrain-epochs", "1"]
    assert main(["train", "--cohort", str(cohort), *small, "--out", str(tmp_path / "m")]) == 0
    assert main(["classify", "--cohort", str(cohort), "--model", str(tmp_path / "m"),
                 "--out", str(tmp_path / "s.csv")]) == 0
    scored = ScoredSet.from_csv((tmp_path / "s.csv").read_text())
    assert len(scored) == 60
    assert np.all((scored.scores >= 0) & (scored.scores <= 1))
