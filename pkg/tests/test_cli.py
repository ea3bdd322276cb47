import json

import pytest

from conceptroute.cli import main
from conceptroute.evaluation import read_table


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert run("gen-data", "--n-records", 300, "--seed", 7, "--out", d) == 0
    return d


@pytest.fixture(scope="module")
def ckpt(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "train"
    assert run("train", "--data", data, "--max-epochs", 3, "--out", out) == 0
    return out / "checkpoint.npz"


def test_gen_data_is_byte_identical(data, tmp_path):
    again = tmp_path / "again"
    assert run("gen-data", "--n-records", 300, "--seed", 7, "--out", again) == 0
    for name in ("header.json", "records.jsonl", "truth.npz", "manifest.json"):
        assert (again / name).read_bytes() == (data / name).read_bytes()


def test_gen_data_from_spec_file(data, tmp_path):
    spec = json.loads((data / "spec.json").read_text())
    spec["n_records"] = 40
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert run("gen-data", "--spec", tmp_path / "s.json", "--out", tmp_path / "d") == 0
    assert len((tmp_path / "d" / "records.jsonl").read_text().splitlines()) == 40


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run("train", "--policy", "bottleneck", "--out", tmp_path / "x") == 1
    assert "--data" in capsys.readouterr().err
    assert run("teleport") == 1
    assert run("train", "--bogus-flag") == 1
    assert run() == 1
    assert run("eval", "--data", tmp_path / "missing", "--checkpoint", "c.npz", "--out", tmp_path / "y") == 1
    assert run("--version") == 0


def test_refuses_non_empty_out_without_force(data, tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert run("train", "--data", data, "--policy", "random", "--out", out) == 1
    assert run("train", "--data", data, "--policy", "random", "--out", out, "--force") == 0
    assert (out / "keep.txt").exists() and (out / "checkpoint.npz").exists()


def test_flags_override_config_file(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"policy": "random", "lam": 2.5, "seed": 4}))
    assert run("train", "--data", data, "--config", cfg, "--lambda", 0.5, "--out", tmp_path / "o") == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["options"]["policy"] == "random"
    assert manifest["options"]["lam"] == 0.5
    assert manifest["seed"] == 4


def test_train_writes_artifacts(ckpt):
    out = ckpt.parent
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["policy"] == "bottleneck" and 0 <= metrics["test_accuracy"] <= 1
    assert {r["head"] for r in read_table(out / "curve.csv")} == {"concept", "suitability"}
    m = json.loads((out / "manifest.json").read_text())
    assert m["outputs"]["checkpoint.npz"] and m["inputs"]


def test_default_sweep_gives_one_hundred_runs_and_stable_manifest(data, tmp_path):
    args = ["sweep", "--data", data, "--lambda-grid", "default", "--seeds", 5, "--max-epochs", 1]
    assert run(*args, "--out", tmp_path / "a") == 0
    runs = read_table(tmp_path / "a" / "runs.csv")
    assert len(runs) == 100 and not any(r["error"] for r in runs)
    assert len(list((tmp_path / "a" / "runs").iterdir())) == 100
    assert run(*args, "--out", tmp_path / "b") == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a == b

    assert run("sweep", "--data", data, "--policy", "blackbox", "--lambda-grid", "default", "--seeds", 5,
               "--max-epochs", 1, "--out", tmp_path / "bb") == 0
    assert run("report", "--sweep", tmp_path / "a", "--compare", tmp_path / "bb", "--out", tmp_path / "r") == 0
    sig = read_table(tmp_path / "r" / "significance.csv")
    assert len(sig) == 20 and all(0 <= float(r["u_p_value"]) <= 1 for r in sig)
    assert read_table(tmp_path / "r" / "pareto.csv")


def test_studies_end_to_end(data, ckpt, tmp_path, capsys):
    assert run("eval", "--data", data, "--checkpoint", ckpt, "--out", tmp_path / "e") == 0
    assert "complexity" in json.loads((tmp_path / "e" / "metrics.json").read_text())["concepts"]
    assert run("intervene", "--data", data, "--checkpoint", ckpt, "--groups", "complexity,tasks",
               "--out", tmp_path / "i") == 0
    assert len(read_table(tmp_path / "i" / "intervention.csv")) == 3
    assert run("counterfactual", "--checkpoint", ckpt, "--n-samples", 50, "--out", tmp_path / "c") == 0
    assert run("counterfactual", "--checkpoint", ckpt, "--top", "nobody", "--out", tmp_path / "c2") == 1
    assert run("bench", "--data", data, "--checkpoint", ckpt, "--repetitions", 2, "--out", tmp_path / "b") == 0
    assert run("ablate", "--data", data, "--groups", "domains", "--lambdas", "0", "--seeds", 1,
               "--max-epochs", 1, "--out", tmp_path / "a") == 0
    assert len(read_table(tmp_path / "a" / "ablation.csv")) == 2


def test_route_command(ckpt, capsys):
    assert run("route", "--checkpoint", ckpt, "--text", "reverse a linked list", "--verbose") == 0
    first = json.loads(capsys.readouterr().out)
    assert run("route", "--checkpoint", ckpt, "--text", "reverse a linked list", "--verbose") == 0
    assert json.loads(capsys.readouterr().out) == first
    assert len(first["concepts"]) == 24 and first["rationale"]
    assert run("route", "--checkpoint", ckpt, "--embedding", "[1, 2]") == 1
    assert run("route", "--checkpoint", ckpt) == 1


def test_serve_needs_a_checkpoint(monkeypatch):
    monkeypatch.delenv("CHECKPOINT_PATH", raising=False)
    assert run("serve") == 1
