import csv
import json
import re

import pytest

from intersection_fl.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, main, version_hash

TINY = """
sim: {episode_steps: 150}
training: {total_steps: 40, eval_seeds: 1}
federation: {densities: [300, 900], rounds: 1, local_steps: 20, eval_density: 900}
selection: {discard_rates: [0.0, 0.1], horizon_steps: 100}
eval_densities: [300, 900]
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def _read_csv(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def test_version_hash_is_git_blob_sha():
    h = version_hash("0.1.0")
    assert re.fullmatch(r"[0-9a-f]{40}", h)
    assert h != version_hash("0.1.1")


def test_bad_config_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sim": {"v_init": 99}}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "sim.v_init" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    broken = tmp_path / "broken.yaml"
    broken.write_text("sim: [1, 2\n")
    assert main(["simulate", "--config", str(broken)]) == EXIT_CONFIG


def test_simulate_single_density_row_and_embedded_config(tiny, tmp_path):
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(tiny), "--out", str(out), "--densities", "300", "--seed", "4"]) == 0
    rows = _read_csv(out / "simulate" / "indicators.csv")
    assert len(rows) == 1 and float(rows[0]["density"]) == 300.0
    assert float(rows[0]["collision_ratio"]) == 0.0
    head = (out / "simulate" / "indicators.csv").read_text().splitlines()[:2]
    assert head[0].endswith(f"version_hash={version_hash()}")
    assert json.loads(head[1][len("# config "):])["seed"] == 4
    summary = json.loads((out / "simulate" / "summary_300.json").read_text())
    assert summary["meta"]["config"]["seed"] == 4 and summary["mode"] == "rule"
    manifest = json.loads((out / "manifest-simulate.json").read_text())
    assert set(manifest["files"]) == {"simulate/indicators.csv", "simulate/indicators.txt",
                                      "simulate/indicators_per_seed.csv", "simulate/summary_300.json"}


def test_rule_trace_flag(tiny, tmp_path):
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(tiny), "--out", str(out), "--densities", "900", "--trace-rules"]) == 0
    rows = _read_csv(out / "simulate" / "rule_trace_900.csv")
    assert rows and set(rows[0]) == {"step", "id", "sv_s", "sv_t", "sv_acc", "sv", "action"}
    assert all(-20 <= float(r["sv"]) <= 20 for r in rows)


def test_check_detects_drift(tiny, tmp_path, capsys):
    out = tmp_path / "o"
    args = ["simulate", "--config", str(tiny), "--out", str(out), "--densities", "300"]
    assert main(args) == EXIT_OK
    assert main(args + ["--check"]) == EXIT_OK
    m = out / "manifest-simulate.json"
    data = json.loads(m.read_text())
    data["files"]["simulate/indicators.csv"] = "0" * 64
    m.write_text(json.dumps(data))
    assert main(args + ["--check"]) == EXIT_CHECK
    assert "changed: simulate/indicators.csv" in capsys.readouterr().err
    # a different seed is drift as well
    m.write_text(json.dumps(json.loads(m.read_text()) | {"files": {}}))
    assert main(args + ["--check"]) == EXIT_CHECK


def test_train_fl_weights_and_delta(tiny, tmp_path):
    out = tmp_path / "o"
    assert main(["train-fl", "--config", str(tiny), "--out", str(out)]) == 0
    rows = _read_csv(out / "fl" / "density" / "federation.csv")
    assert [float(r["weight"]) for r in rows] == pytest.approx([0.25, 0.75])
    assert [float(r["weight"]) for r in _read_csv(out / "fl" / "same" / "federation.csv")] == [0.5, 0.5]
    comp = _read_csv(out / "fl" / "comparison.csv")
    assert "J_delta_density_minus_same" in comp[0]
    assert (out / "fl" / "same" / "model_round0_trainer1.bin").exists()
    assert main(["train-fl", "--config", str(tiny), "--out", str(tmp_path / "p"), "--mode", "same"]) == 0
    assert not (tmp_path / "p" / "fl" / "density").exists()


def test_train_il_matrix_and_evaluate(tiny, tmp_path):
    out = tmp_path / "o"
    assert main(["train-il", "--config", str(tiny), "--out", str(out)]) == 0
    rows = _read_csv(out / "il" / "eval_matrix.csv")
    learned = [r for r in rows if r["train_density"] != "rule"]
    assert len(learned) == 2 * 2 * 2  # train densities x eval densities x modes
    ck = out / "il" / "model_density900.bin"
    assert main(["evaluate", "--config", str(tiny), "--out", str(out), "--checkpoint", str(ck)]) == 0
    assert len(_read_csv(out / "evaluate" / "indicators.csv")) == 2 * 3
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope")
    assert main(["evaluate", "--config", str(tiny), "--out", str(out), "--checkpoint", str(bad)]) == EXIT_CONFIG


def test_sweep_selection_p_flag(tiny, tmp_path):
    out = tmp_path / "o"
    assert main(["sweep-selection", "--config", str(tiny), "--out", str(out), "--p", "0,0.05"]) == 0
    rows = _read_csv(out / "selection" / "table.csv")
    assert [float(r["p"]) for r in rows] == [0.0, 0.05]
    assert float(rows[0]["savings_pct"]) == 0.0
    savings = _read_csv(out / "selection" / "savings_p0.05.csv")
    assert set(savings[0]) == {"step", "generated", "uploaded", "discarded", "threshold"}
