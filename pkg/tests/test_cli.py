import csv
import io
import json

import pytest

from nncompress.cli import run
from nncompress.modelio import load_model


def _files(*paths):
    return [p.read_bytes() for p in paths]


@pytest.fixture
def ws(cli_workspace):
    return cli_workspace


def test_gen_data_deterministic(tmp_path):
    assert run(["gen-data", "--seed", "3", "--train-samples", "100", "--test-samples", "20",
                "--out", str(tmp_path / "a")]) == 0
    assert run(["gen-data", "--seed", "3", "--train-samples", "100", "--test-samples", "20",
                "--out", str(tmp_path / "b")]) == 0
    for name in ("train.npz", "test.npz", "spec.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_deterministic(ws, tmp_path):
    args = ["train", "--data", str(ws / "data"), "--epochs", "1", "--seed", "2"]
    assert run(args + ["--out", str(tmp_path / "a.ncmf")]) == 0
    assert run(args + ["--out", str(tmp_path / "b.ncmf")]) == 0
    assert _files(tmp_path / "a.ncmf") == _files(tmp_path / "b.ncmf")


def test_quantize_thread_invariance(ws, tmp_path, monkeypatch):
    base = ["quantize", "--model", str(ws / "toy.ncmf"), "--base-clusters", "8", "--params-per-set", "1000"]
    assert run(base + ["--threads", "1", "--out", str(tmp_path / "1.ncmf")]) == 0
    assert run(base + ["--threads", "4", "--out", str(tmp_path / "4.ncmf"),
                       "--records", str(tmp_path / "rec.json")]) == 0
    monkeypatch.setenv("THREADS", "3")
    assert run(base + ["--out", str(tmp_path / "env.ncmf")]) == 0
    assert _files(tmp_path / "1.ncmf") == _files(tmp_path / "4.ncmf") == _files(tmp_path / "env.ncmf")
    rec = json.loads((tmp_path / "rec.json").read_text())
    assert rec["fc1.weight"]["c"] == 40 and rec["conv1.weight"]["c"] == 8


def test_prune_quick_schedule(ws, tmp_path):
    rc = run(["prune", "--model", str(ws / "toy.ncmf"), "--data", str(ws / "data"), "--step", "0.3",
              "--retrain-epochs", "1", "--target-drop", "1.0", "--out", str(tmp_path / "p.ncmf"),
              "--history", str(tmp_path / "h.json")])
    assert rc == 0
    hist = json.loads((tmp_path / "h.json").read_text())
    assert [round(it["percentage"], 6) for it in hist["iterations"]] == [0.3, 0.6, 0.9, 1.0]
    assert hist["config"]["seed"] == 0


def test_prune_class_distribution(ws, tmp_path):
    rc = run(["prune", "--model", str(ws / "toy.ncmf"), "--data", str(ws / "data"),
              "--strategy", "class-distribution", "--lam", "0.5", "--retrain-epochs", "1",
              "--out", str(tmp_path / "p.ncmf")])
    assert rc == 0
    m = load_model(tmp_path / "p.ncmf")
    assert sum(int((~m.masks[c]).sum()) for c in m.prunable) > 0


def test_class_distribution_needs_lambda(ws, tmp_path, capsys):
    rc = run(["prune", "--model", str(ws / "toy.ncmf"), "--data", str(ws / "data"),
              "--strategy", "class-distribution", "--out", str(tmp_path / "p.ncmf")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")


def test_unreachable_threshold_exit_3(ws, tmp_path, capsys):
    rc = run(["prune", "--model", str(ws / "toy.ncmf"), "--data", str(ws / "data"), "--initial", "1.0",
              "--retrain-epochs", "1", "--target-drop", "0.01", "--out", str(tmp_path / "p.ncmf")])
    assert rc == 3
    assert "error:" in capsys.readouterr().err


@pytest.fixture(scope="module")
def compressed(cli_workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("compress")
    rc = run(["compress", "--model", str(cli_workspace / "toy.ncmf"), "--data", str(cli_workspace / "data"),
              "--target-drop", "0.05", "--out", str(out / "q.ncmf"), "--pruned-out", str(out / "p.ncmf"),
              "--report", str(out / "r.json")])
    assert rc == 0
    return out


def test_compress_reference_run(compressed):
    # reference run: defaults (step 0.05, retrain 3, target drop 0.05) on the seed 0 toy model
    rep = json.loads((compressed / "r.json").read_text())
    assert rep["config"]["percentage_pruned"] >= 0.80
    trace = {t["stage"]: t["value"] for t in rep["accuracy_trace"]}
    assert trace["initial"] - trace["pruned"] <= 0.05
    assert rep["totals"]["bytes_quantized"] < rep["totals"]["bytes_pruned"] < rep["totals"]["bytes_initial"]
    assert "threads" not in json.dumps(rep["config"])


def test_report_formats(ws, compressed, tmp_path, capsys):
    args = ["report", "--initial", str(ws / "toy.ncmf"), "--pruned", str(compressed / "p.ncmf"),
            "--quantized", str(compressed / "q.ncmf")]
    assert run(args + ["--format", "json", "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    fresh = json.loads((compressed / "r.json").read_text())
    assert rep["layers"] == fresh["layers"] and rep["totals"] == fresh["totals"]
    assert run(args + ["--format", "csv"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert rows[-1]["class"] == "TOTAL" and int(rows[-1]["n"]) == 4538


def test_report_identical_models(ws, capsys):
    m = str(ws / "toy.ncmf")
    assert run(["report", "--initial", m, "--pruned", m, "--quantized", m, "--format", "table"]) == 0
    total = [line for line in capsys.readouterr().out.splitlines() if line.startswith("TOTAL")][0]
    assert total.split()[-1] == "1.0000"


def test_inspect_mnist_counts(capsys):
    assert run(["inspect", "--arch", "mnist"]) == 0
    out = capsys.readouterr().out
    assert "per layer: conv1=520, conv2=25050, fc1=400500, fc2=5010" in out
    assert "431080" in out and "initial bytes: 1724320" in out


def test_inspect_model_file(ws, capsys):
    assert run(["inspect", "--model", str(ws / "toy.ncmf"), "--bins", "4"]) == 0
    out = capsys.readouterr().out
    assert "fc1.weight" in out and "#" in out


@pytest.mark.parametrize("argv", [[], ["bogus"], ["quantize"], ["inspect", "--arch", "mnist", "--model", "x"],
                                  ["train", "--data", "d", "--out", "o", "--epochs", "many"]])
def test_usage_errors(argv, capsys):
    assert run(argv) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_file(tmp_path, capsys):
    assert run(["inspect", "--model", str(tmp_path / "nope.ncmf")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_corrupt_file(ws, tmp_path, capsys):
    buf = bytearray((ws / "toy.ncmf").read_bytes())
    buf[60] ^= 0xFF
    (tmp_path / "bad.ncmf").write_bytes(bytes(buf))
    assert run(["inspect", "--model", str(tmp_path / "bad.ncmf")]) == 2
    assert "checksum" in capsys.readouterr().err.lower()
