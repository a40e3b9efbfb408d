import csv
import json

import numpy as np
import pytest

from isotope.cli import main
from isotope.imgdata import load_dataset
from isotope.marks import load_mark
from isotope.model import load_model


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data -> make-mark -> mark-dataset -> train, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("gen-data", "--classes", "4", "--per-class", "40",
               "--test-per-class", "20", "--dims", "3x16x16", "--seed", "3",
               "--out", str(data)) == 0
    mark = root / "mark.json"
    ext = root / "ext.json"
    assert run("make-mark", "--kind", "blend_image", "--dims", "3x16x16",
               "--alpha", "0.4", "--seed", "5", "--out", str(mark)) == 0
    assert run("make-mark", "--kind", "blend_image", "--dims", "3x16x16",
               "--alpha", "0.4", "--seed", "6", "--out", str(ext)) == 0
    marked = root / "marked"
    assert run("mark-dataset", "--data", str(data / "train"), "--mark", str(mark),
               "--target-class", "1", "--fraction", "0.25", "--seed", "7",
               "--out", str(marked)) == 0
    model = root / "model.bin"
    assert run("train", "--data", str(marked), "--test", str(data / "test"),
               "--epochs", "4", "--lr", "0.02", "--batch-size", "32", "--seed", "8",
               "--metrics-csv", str(root / "metrics.csv"),
               "--out", str(model)) == 0
    return root


def test_gen_data_layout(workspace):
    train = load_dataset(workspace / "data" / "train")
    test = load_dataset(workspace / "data" / "test")
    assert train.n == 160 and test.n == 80
    assert train.split == "train" and test.split == "test"
    assert np.array_equal(train.norm_mean, test.norm_mean)


def test_make_mark_file(workspace):
    mark = load_mark(workspace / "mark.json")
    assert mark.kind == "blend_image"
    assert mark.alpha == 0.4


def test_mark_dataset_counts(workspace):
    marked = load_dataset(workspace / "marked")
    tagged = [i for i, m in enumerate(marked.mark_ids) if m]
    assert len(tagged) == 10  # 25% of 40
    assert np.all(marked.labels[tagged] == 1)


def test_train_outputs(workspace):
    model = load_model(workspace / "model.bin")
    assert model.num_classes == 4
    with open(workspace / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8  # 4 epochs x train+test
    assert {r["split"] for r in rows} == {"train", "test"}


def test_verify_subcommand_runs(workspace, capsys):
    rc = run("verify", "--model", str(workspace / "model.bin"),
             "--aux", str(workspace / "data" / "test"),
             "--target-class", "1", "--mark", str(workspace / "mark.json"),
             "--external", str(workspace / "ext.json"),
             "--n", "40", "--rounds", "3", "--seed", "9",
             "--out", str(workspace / "report.json"))
    assert rc == 0
    report = json.loads((workspace / "report.json").read_text())
    assert report["verdict"] in (0, 1)
    assert len(report["p_values"]) == 3
    assert report["query_count"] == 2 * 40 * 3
    out = capsys.readouterr().out
    assert "verdict=" in out


def test_verify_mark_blind_model_verdict_zero(workspace, tmp_path, capsys):
    # untrained model (epochs=0) has zero output weights: constant vector
    model = tmp_path / "blind.bin"
    assert run("train", "--data", str(workspace / "data" / "train"),
               "--epochs", "0", "--out", str(model)) == 0
    rc = run("verify", "--model", str(model),
             "--aux", str(workspace / "data" / "test"),
             "--target-class", "1", "--mark", str(workspace / "mark.json"),
             "--external", str(workspace / "ext.json"),
             "--n", "40", "--rounds", "3", "--seed", "9")
    assert rc == 0
    assert "verdict=0" in capsys.readouterr().out


def test_distinguish_subcommand_runs(workspace, capsys):
    rc = run("distinguish", "--model", str(workspace / "model.bin"),
             "--aux", str(workspace / "data" / "test"),
             "--mark-a", str(workspace / "mark.json"), "--class-a", "1",
             "--mark-b", str(workspace / "ext.json"), "--class-b", "2",
             "--n", "30", "--rounds", "3", "--seed", "9")
    assert rc == 0
    assert "distinguish=" in capsys.readouterr().out


def test_usage_errors_exit_1(capsys):
    assert run("verify") == 1
    err = capsys.readouterr().err
    assert "usage error" in err
    assert run("no-such-command") == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    rc = run("train", "--data", str(tmp_path / "missing"), "--out",
             str(tmp_path / "m.bin"))
    assert rc == 2
    assert "runtime error" in capsys.readouterr().err


def test_json_error_output(tmp_path, capsys):
    rc = run("--json", "train", "--data", str(tmp_path / "missing"),
             "--out", str(tmp_path / "m.bin"))
    assert rc == 2
    doc = json.loads(capsys.readouterr().err)
    assert doc["kind"] == "runtime"


def test_isotope_home_resolves_relative_outputs(tmp_path, monkeypatch):
    monkeypatch.setenv("ISOTOPE_HOME", str(tmp_path))
    assert run("make-mark", "--dims", "3x8x8", "--seed", "1",
               "--out", "m.json") == 0
    assert (tmp_path / "m.json").exists()


def test_config_file_defaults(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"kind": "pixel_square", "square-size": 3}))
    assert run("--config", str(cfg), "make-mark", "--dims", "3x8x8",
               "--seed", "1", "--out", str(tmp_path / "m.json")) == 0
    mark = load_mark(tmp_path / "m.json")
    assert mark.kind == "pixel_square"
    assert mark.mask[0].sum() == 9


def test_report_aggregates_csvs(tmp_path):
    rows = [
        {"schema_version": 1, "alpha": 0.4, "p": 0.25, "q": 5, "seed": 0,
         "accuracy": 0.95, "v_t": 1.0, "v_f": 0.0, "v_dt": "", "error": ""},
        {"schema_version": 1, "alpha": 0.4, "p": 0.25, "q": 5, "seed": 1,
         "accuracy": 0.93, "v_t": 0.8, "v_f": 0.0, "v_dt": "", "error": ""},
        {"schema_version": 1, "alpha": 0.1, "p": 0.25, "q": 5, "seed": 0,
         "accuracy": 0.94, "v_t": 0.0, "v_f": 0.2, "v_dt": "", "error": ""},
    ]
    src = tmp_path / "sweep.csv"
    with open(src, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    out = tmp_path / "report.csv"
    assert run("report", "--inputs", str(src), "--group-by", "alpha",
               "--out", str(out)) == 0
    with open(out) as fh:
        agg = {r["alpha"]: r for r in csv.DictReader(fh)}
    assert float(agg["0.4"]["mean_v_t"]) == pytest.approx(0.9)
    assert float(agg["0.1"]["mean_v_t"]) == 0.0


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        run("--help")
    assert exc.value.code == 0
