import csv
import json
import shutil

import pytest

from clusterbreak.cli import OUT_ENV, main, make_config, read_config_file
from clusterbreak.errors import ConfigValidationError, MissingFieldError
from clusterbreak.reporting import (REPORT_SCHEMA_VERSION, WALL_CLOCK_FIELD, load_report,
                                    render_tables, strip_wall_clock, write_report)

# small, well separated data so a short run still trains a useful clusterer
DATA = ["--n-per-class", "150", "--k-true", "3", "--class-separation", "8"]
ATTACK = ["--max-batches", "60", "--min-batches", "0", "--batch-size", "32", "--epsilon", "2.0"]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert main(["train-clusterer", *DATA, "--pretrain-epochs", "30", "--refine-epochs", "3",
                 "--out", str(root / "train")]) == 0
    ckpt = root / "train" / "model.ckpt"
    assert main(["attack", *DATA, *ATTACK, "--victim", str(ckpt), "--out", str(root / "attack")]) == 0
    return root


def test_train_report(runs):
    doc = load_report(runs / "train" / "report.json")
    assert doc["schema_version"] == REPORT_SCHEMA_VERSION
    assert doc["kind"] == "train" and doc["model_id"] == "toy-s0"
    assert doc["pre"]["nmi"] > 0.8
    assert set(doc["artifacts"]) == {"model.ckpt", "confusion_clean.csv"}
    assert all(len(h) == 64 for h in doc["artifacts"].values())


def test_attack_lowers_nmi_and_reports_ledger(runs):
    doc = load_report(runs / "attack" / "report.json")
    assert doc["post"]["nmi"] < doc["pre"]["nmi"]
    ledger = doc["ledger"]
    assert ledger["batch_queries"] > 0
    assert ledger["batch_queries"] == 2 * ledger["training_batches"] - ledger["cache_hits"]
    assert doc["delta_stats"]["max"] <= 2.0 + 1e-4
    assert doc["config"]["epsilon"] == 2.0


def test_rerun_is_byte_identical_except_wall_clock(runs):
    out = runs / "attack"
    first = (out / "report.json").read_text()
    ckpt = runs / "train" / "model.ckpt"
    assert main(["attack", *DATA, *ATTACK, "--victim", str(ckpt), "--out", str(out)]) == 0
    second = (out / "report.json").read_text()
    assert WALL_CLOCK_FIELD in first
    assert strip_wall_clock(first) == strip_wall_clock(second)


def test_negative_epsilon_is_a_config_error(runs, capsys):
    ckpt = runs / "train" / "model.ckpt"
    code = main(["attack", "--victim", str(ckpt), "--epsilon", "-1", "--out", str(runs / "bad")])
    assert code == 2
    assert "epsilon" in capsys.readouterr().err
    assert not (runs / "bad" / "report.json").exists()


def test_missing_path_and_unsorted_sweep_are_config_errors(tmp_path, capsys):
    assert main(["attack", "--victim", str(tmp_path / "nope.ckpt")]) == 2
    assert "victim" in capsys.readouterr().err
    (tmp_path / "v.ckpt").write_bytes(b"")
    assert main(["sweep-epsilon", "--victim", str(tmp_path / "v.ckpt"),
                 "--epsilons", "0.5,0.1"]) == 2
    assert "epsilons" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# attack settings\nepsilon = 0.7\nalpha-a = 5\n\n")
    file_values = read_config_file(path)
    assert file_values == {"epsilon": "0.7", "alpha_a": "5"}
    cfg = make_config("attack", {"epsilon": 0.3}, file_values)
    assert cfg.epsilon == 0.3
    assert cfg.alpha_a == 5.0
    assert cfg.alpha_c == 100.0
    with pytest.raises(ConfigValidationError):
        make_config("attack", {}, {"bogus": "1"})
    path.write_text("no equals sign\n")
    with pytest.raises(ConfigValidationError):
        read_config_file(path)


def test_config_file_through_main(tmp_path, capsys):
    path = tmp_path / "run.cfg"
    path.write_text("epsilon = -3\n")
    (tmp_path / "v.ckpt").write_bytes(b"")
    assert main(["attack", "--config", str(path), "--victim", str(tmp_path / "v.ckpt")]) == 2
    assert "epsilon" in capsys.readouterr().err


def test_out_env_var_sets_default_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    assert make_config("attack", {}).out == str(tmp_path / "attack")
    assert make_config("report", {}).out == str(tmp_path)
    assert make_config("attack", {"out": "x"}).out == "x"


def _fake_report(out, model_id, **extra):
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "kind": "attack", "model_id": model_id,
           "dataset": "d", "config": {"epsilon": 0.5}, "artifacts": {}, "warnings": [],
           WALL_CLOCK_FIELD: 0.0, "pre": {"nmi": 0.9, "ari": 0.8, "acc": 0.9}}
    doc.update(extra)
    write_report(doc, out)


def test_render_single_attack_report(runs, tmp_path):
    shutil.copytree(runs / "attack", tmp_path / "attack")
    render_tables(tmp_path)
    rows = list(csv.reader(open(tmp_path / "metrics_table.csv")))
    assert len(rows) == 2
    assert rows[1][0] == "model"
    queries = list(csv.reader(open(tmp_path / "query_table.csv")))
    assert len(queries) == 2 and queries[1][2] == "2.0"


def test_render_sorts_by_model_id(tmp_path):
    _fake_report(tmp_path / "r1", "zeta")
    _fake_report(tmp_path / "r2", "alpha")
    render_tables(tmp_path)
    rows = list(csv.reader(open(tmp_path / "metrics_table.csv")))
    assert [r[0] for r in rows[1:]] == ["alpha", "zeta"]


def test_render_missing_field(tmp_path):
    ledger = {"batch_size": 8, "batch_queries": 3, "training_batches": 2, "cache_hits": 1,
              "converged": True}
    _fake_report(tmp_path / "r", "m", ledger=ledger, config={})
    with pytest.raises(MissingFieldError) as err:
        render_tables(tmp_path)
    assert err.value.field == "epsilon"
    with pytest.raises(FileNotFoundError):
        render_tables(tmp_path / "empty")


def test_transfer_verb_and_square_table(runs, capsys):
    ckpt = runs / "train" / "model.ckpt"
    twin = runs / "twin.ckpt"
    shutil.copy(ckpt, twin)
    gen = runs / "attack" / "generator.pt"
    out = runs / "transfer"
    assert main(["transfer", *DATA, "--victims", f"{ckpt},{twin}",
                 "--generators", f"{gen},{gen}", "--out", str(out)]) == 0
    doc = load_report(out / "report.json")
    assert doc["transfer"]["sources"] == ["model", "twin"]
    assert main(["report", "--reports", str(runs), "--out", str(runs)]) == 0
    printed = capsys.readouterr().out
    table = runs / "transfer_model+twin_nmi.csv"
    assert str(table) in printed
    rows = list(csv.reader(open(table)))
    assert rows[0] == ["source\\target", "model", "twin"]
    assert len(rows) == 3 and all(len(r) == 3 for r in rows)
    # identical models see identical adversarial samples
    assert rows[1][1] == rows[1][2] == rows[2][1]
    json.loads((out / "transfer.json").read_text())


def test_defend_verb(runs):
    ckpt = runs / "train" / "model.ckpt"
    gen = runs / "attack" / "generator.pt"
    out = runs / "defend"
    # half of a 50% test split leaves enough holdout images for calibration
    assert main(["defend", *DATA, "--test-fraction", "0.5", "--victim", str(ckpt),
                 "--generator", str(gen), "--trials", "2", "--retrain-epochs", "1",
                 "--out", str(out)]) == 0
    doc = load_report(out / "report.json")
    assert 0 <= doc["detector"]["report"]["false_positive_rate"] <= 1
    assert 0 <= doc["pca"]["overlap_score"] <= 1
    assert set(doc["artifacts"]) == {"pca.csv", "retrained.ckpt"}
    assert set(doc["retrained"]) == {"clean", "adversarial"}


def test_attack_mlaas_verb_in_process(runs):
    ckpt = runs / "train" / "model.ckpt"
    gen = runs / "attack" / "generator.pt"
    out = runs / "mlaas"
    assert main(["attack-mlaas", *DATA, "--victim", str(ckpt), "--generator", str(gen),
                 "--backend", str(ckpt), "--runs", "2", "--per-identity", "5",
                 "--out", str(out)]) == 0
    doc = load_report(out / "report.json")
    assert doc["resampling"]["runs"] == 2
    assert (out / "service_runs.csv").read_text().count("\n") == 3
