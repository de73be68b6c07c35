from __future__ import annotations

import json

import pytest

from moe2.cli import ValidationError, parse_and_dispatch, parse_constraints, parse_mask

SMALL = {
    "workload": {"n_prompts": 80, "embedding_dim": 8, "n_clusters": 4, "vocab_size": 16},
    "fleet": {"n_experts": 8, "k_clusters": 4},
    "train": {"epochs": 3, "hidden_dims": [8]},
}


def run(*argv) -> int:
    return parse_and_dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    data, gate = root / "data", root / "gate"
    assert run("gen-workload", "--config", cfg, "--out", data, "--seed", 4) == 0
    assert run("train-gate", "--config", cfg, "--workload", data / "train.json",
               "--fleet", data / "fleet.json", "--out", gate, "--seed", 4) == 0
    return root, data, gate


def test_help_and_usage_errors(capsys):
    assert run("--help") == 0
    assert run() == 2
    assert run("no-such-command") == 2
    assert run("sweep", "--out", "x") == 2
    assert "--config" in capsys.readouterr().err


def test_missing_input_is_a_validation_error(tmp_path):
    assert run("train-gate", "--out", tmp_path) == 2


def test_generated_files(pipeline):
    _, data, gate = pipeline
    for name in ("workload.json", "train.json", "test.json", "fleet.json", "run_manifest.json"):
        assert (data / name).exists()
    wl = json.loads((data / "workload.json").read_text())
    assert len(wl["prompts"]) == 80
    manifest = json.loads((gate / "run_manifest.json").read_text())
    assert manifest["command"] == "train-gate" and manifest["seed"] == 4
    assert set(manifest["outputs"]) == {str(gate / "theta.json"), str(gate / "training.json")}


def test_cost_report_to_stdout(pipeline, capsys):
    _, data, _ = pipeline
    assert run("cost-report", "--workload", data / "test.json", "--fleet", data / "fleet.json",
               "--mask", "11000000", "--e-max", 100) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["members"] == [0, 1] and doc["report"]["feasible"] is True
    assert len(doc["experts"]) == 8


def test_select_subset_and_infer(pipeline):
    root, data, gate = pipeline
    sel = root / "sel"
    assert run("select-subset", "--workload", data / "test.json", "--objective-workload", data / "train.json",
               "--fleet", data / "fleet.json", "--theta", gate / "theta.json",
               "--tau-max", "0=2", "--tau-max", "1=2", "--e-max", 8, "--out", sel) == 0
    doc = json.loads((sel / "selection.json").read_text())
    assert doc["report"]["feasible"] and doc["report"]["energy"] <= 8
    inf = root / "inf"
    assert run("infer", "--workload", data / "test.json", "--fleet", data / "fleet.json",
               "--theta", gate / "theta.json", "--mask", doc["mask"], "--k", 2, "--out", inf) == 0
    lines = (inf / "answers.jsonl").read_text().splitlines()
    assert len(lines) == 16
    summary = json.loads((inf / "summary.json").read_text())
    assert summary["accuracy"] == pytest.approx(sum(json.loads(l)["correct"] for l in lines) / 16)


def test_infeasible_selection_exits_3(pipeline, capsys):
    root, data, gate = pipeline
    out = root / "infeasible"
    code = run("select-subset", "--workload", data / "test.json", "--fleet", data / "fleet.json",
               "--theta", gate / "theta.json", "--e-max", 1e-6, "--out", out)
    assert code == 3
    doc = json.loads((out / "selection.json").read_text())
    assert doc["status"] == "infeasible" and doc["binding"] == "e_max"
    assert "infeasible" in capsys.readouterr().err


def test_replaying_a_manifest_reproduces_outputs(pipeline, tmp_path):
    _, data, gate = pipeline
    again = tmp_path / "again"
    assert run("train-gate", "--config", gate / "run_manifest.json", "--out", again) == 0
    assert (again / "theta.json").read_bytes() == (gate / "theta.json").read_bytes()


def test_manifest_for_another_command_is_rejected(pipeline, tmp_path):
    _, _, gate = pipeline
    assert run("gen-workload", "--config", gate / "run_manifest.json", "--out", tmp_path) == 2


def test_seed_from_environment(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    monkeypatch.setenv("MOE2_SEED", "9")
    assert run("gen-workload", "--config", cfg, "--out", tmp_path / "a") == 0
    assert json.loads((tmp_path / "a" / "run_manifest.json").read_text())["seed"] == 9
    assert run("gen-workload", "--config", cfg, "--out", tmp_path / "b", "--seed", 9) == 0
    assert (tmp_path / "a" / "workload.json").read_bytes() == (tmp_path / "b" / "workload.json").read_bytes()


def test_sweep_writes_tables(tmp_path):
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps({**SMALL, "fleet": {"n_experts": 8, "k_clusters": 8},
                               "experiment": {"tau_grid": [3.0], "energy_grid": [10.0], "replicates": 2}}))
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s", "--seed", 1) == 0
    rows = json.loads((tmp_path / "s" / "results.json").read_text())["rows"]
    assert {r["seed"] for r in rows} == {1, 2}
    assert (tmp_path / "s" / "results_tau_3.csv").read_text().startswith("method,E_max=10")


def test_parsers():
    assert parse_mask("all", 3).bits == 0b111
    assert parse_mask("101", 3).members() == [0, 2]
    assert parse_mask("0,2", 3).members() == [0, 2]
    c = parse_constraints(["1=0.5"], 10.0, 2)
    assert c.tau_max == (float("inf"), 0.5) and c.e_max == 10.0
    assert parse_constraints(["2"], None, 2).tau_max == (2.0, 2.0)
    with pytest.raises(ValidationError):
        parse_mask("0000", 4)


def test_replay_keeps_uniform_deadline(pipeline, tmp_path):
    _, data, gate = pipeline
    first, again = tmp_path / "first", tmp_path / "again"
    assert run("select-subset", "--workload", data / "test.json", "--fleet", data / "fleet.json",
               "--theta", gate / "theta.json", "--tau-max", 2, "--e-max", 8, "--out", first) == 0
    assert run("select-subset", "--config", first / "run_manifest.json", "--out", again) == 0
    doc = json.loads((again / "selection.json").read_text())
    assert doc["constraints"]["tau_max"] == [2.0, 2.0]
    assert (again / "selection.json").read_bytes() == (first / "selection.json").read_bytes()
