import json
import math

import numpy as np
import pytest

from frappe_kit.cli import main
from frappe_kit.config import load_config, validate_config
from frappe_kit.errors import SchemaError

BASE_CFG = {
    "data": {"synth": {"n": 1200, "seed": 3}},
    "base": {"kind": "linear"},
    "posthoc": {"kind": "linear"},
    "objective": {"mode": "frappe", "regularizer": {"type": "MinDiffMMD"}, "lambda_grid": [2.0]},
    "train": {"epochs": 15, "lr": 0.05, "seed": 1, "repeats": 2},
    "glm": {"family": "logistic", "lambda": 1.0, "n_probe": 20, "n_inits": 1},
    "baseline": {"p_grid": [0, 0.5, 1]},
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


def run(tmp_path, command, cfg, out, *extra):
    return main([command, "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / out), *extra])


def test_synth_writes_csv_and_sidecar(tmp_path):
    assert run(tmp_path, "synth", BASE_CFG, "a") == 0
    assert run(tmp_path, "synth", BASE_CFG, "b") == 0
    text = (tmp_path / "a" / "data.csv").read_text()
    assert len(text.splitlines()) == 1201
    assert (tmp_path / "a" / "data.csv").read_bytes() == (tmp_path / "b" / "data.csv").read_bytes()
    side = json.loads((tmp_path / "a" / "data.json").read_text())
    assert side["synth"]["n"] == 1200 and side["schema"]["label"] == "y"
    assert (tmp_path / "a" / "manifest.json").exists()


def test_negative_noise_is_config_error(tmp_path, capsys):
    cfg = {"data": {"synth": {"noise_scale": -1.0}}}
    assert run(tmp_path, "synth", cfg, "x") == 2
    assert "noise_scale" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path):
    assert run(tmp_path, "synth", {**BASE_CFG, "colour": 1}, "x") == 2
    with pytest.raises(SchemaError):
        validate_config({"train": {"epochs": 3, "speed": 2}})


def test_train_frappe_single_lambda(tmp_path):
    assert run(tmp_path, "train", BASE_CFG, "t") == 0
    files = sorted(p.name for p in (tmp_path / "t").iterdir())
    assert files == ["manifest.json", "model.json"]
    man = json.loads((tmp_path / "t" / "manifest.json").read_text())
    assert man["command"] == "train" and len(man["runs"]) == 1
    model = json.loads((tmp_path / "t" / "model.json").read_text())
    assert model["role"] == "fair" and "standardizer" in model


def test_frappe_without_base_is_config_error(tmp_path):
    cfg = {k: v for k, v in BASE_CFG.items() if k != "base"}
    assert run(tmp_path, "train", cfg, "t") == 2


def test_inprocessing_zero_matches_train_base(tmp_path):
    cfg = {**BASE_CFG, "objective": {"mode": "in_processing", "lambda_grid": [0.0]}}
    assert run(tmp_path, "train", cfg, "ip") == 0
    assert run(tmp_path, "train-base", BASE_CFG, "tb") == 0
    ip = json.loads((tmp_path / "ip" / "manifest.json").read_text())["runs"][0]["result"]["history"]
    tb = json.loads((tmp_path / "tb" / "manifest.json").read_text())["result"]["history"]
    assert ip["objective"] == tb["objective"] and ip["val_error"] == tb["val_error"]


def test_sweep_outputs_and_determinism(tmp_path):
    cfg = {**BASE_CFG, "output": {"plot": True}}
    assert run(tmp_path, "sweep", cfg, "s1") == 0
    assert run(tmp_path, "sweep", cfg, "s2", "--workers", "2") == 0
    for name in ("tradeoff.csv", "pareto.csv", "reference.csv"):
        assert (tmp_path / "s1" / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()
    rows = (tmp_path / "s1" / "tradeoff.csv").read_text().splitlines()
    assert rows[0] == "lambda,seed,test_error,fpr_gap,sp_gap,meo,hgr_inf,train_penalty,epochs_run"
    assert len(rows) == 3
    assert (tmp_path / "s1" / "frontier.png").stat().st_size > 0


def test_sweep_lambda_zero_collapses_to_base(tmp_path):
    cfg = {**BASE_CFG, "objective": {**BASE_CFG["objective"], "lambda_grid": [0.0]}}
    assert run(tmp_path, "sweep", cfg, "s") == 0
    pareto = (tmp_path / "s" / "pareto.csv").read_text().splitlines()
    assert len(pareto) == 2
    ref = (tmp_path / "s" / "reference.csv").read_text().splitlines()[1:]
    errs = [float(r.split(",")[2]) for r in ref]
    assert float(pareto[1].split(",")[2]) == pytest.approx(np.mean(errs), abs=1e-15)


def test_sweep_partial_failure_exit_4(tmp_path):
    cfg = {**BASE_CFG, "data": {"synth": {"n": 400, "seed": 1}, "sensitive_fraction": 0.001}}
    assert run(tmp_path, "sweep", cfg, "s") == 4
    man = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert man["status"] == "partial" and len(man["failures"]) == 2


def test_eval_analyze_and_baseline(tmp_path):
    assert run(tmp_path, "train-base", BASE_CFG, "tb") == 0
    assert run(tmp_path, "train", BASE_CFG, "t") == 0
    cfg = {**BASE_CFG, "base": {"model": str(tmp_path / "tb" / "base_model.json")},
           "eval": {"model": str(tmp_path / "t" / "model.json"), "metrics": ["test_error", "fpr_gap"]}}
    assert run(tmp_path, "eval", cfg, "e") == 0
    metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())["metrics"]
    assert set(metrics) == {"test_error", "fpr_gap"}
    assert run(tmp_path, "analyze-posthoc", cfg, "a") == 0
    assert (tmp_path / "a" / "posthoc_correlations.csv").read_text().startswith("feature,sensitive_value")
    assert run(tmp_path, "baseline-naive", cfg, "b") == 0
    lines = (tmp_path / "b" / "baseline.csv").read_text().splitlines()
    assert len(lines) == 4
    p0, p1 = lines[1].split(","), lines[3].split(",")
    assert float(p0[-1]) == 1.0  # all favorable
    base_eval = {**cfg, "eval": {"model": str(tmp_path / "tb" / "base_model.json"), "metrics": ["test_error"]}}
    assert run(tmp_path, "eval", base_eval, "eb") == 0
    base_err = json.loads((tmp_path / "eb" / "metrics.json").read_text())["metrics"]["test_error"]
    assert float(p1[1]) == base_err


def test_eval_unknown_metric(tmp_path, capsys):
    assert run(tmp_path, "train", BASE_CFG, "t") == 0
    cfg = {**BASE_CFG, "eval": {"model": str(tmp_path / "t" / "model.json"), "metrics": ["accuracy"]}}
    assert run(tmp_path, "eval", cfg, "e") == 2
    assert "fpr_gap" in capsys.readouterr().err


def test_missing_files_exit_2(tmp_path):
    cfg = {**BASE_CFG, "data": {"path": "nope.csv", "schema": {"features": ["x"], "label": "y"}}}
    assert run(tmp_path, "train", cfg, "t") == 2
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2


def test_diverged_training_exit_3(tmp_path, capsys):
    cfg = {**BASE_CFG, "base": {"kind": "mlp1", "hidden": [8]},
           "train": {"epochs": 20, "lr": 1e6, "optimizer": "sgd"}}
    assert run(tmp_path, "train-base", cfg, "tb") == 3
    assert "epoch" in capsys.readouterr().err


def test_verify_glm_pass_and_fail(tmp_path):
    assert run(tmp_path, "verify-glm", BASE_CFG, "v") == 0
    rep = json.loads((tmp_path / "v" / "equivalence.json").read_text())
    assert rep["passed"] and rep["max_constant_deviation"] <= 1e-8
    strict = {**BASE_CFG, "glm": {**BASE_CFG["glm"], "tolerance": 1e-300}}
    assert run(tmp_path, "verify-glm", strict, "v2") == 5


def test_csv_data_and_relative_paths(tmp_path):
    assert run(tmp_path, "synth", BASE_CFG, "d") == 0
    schema = json.loads((tmp_path / "d" / "data.json").read_text())["schema"]
    cfg = {**BASE_CFG, "data": {"path": "d/data.csv", "schema": schema}}
    loaded = load_config(write_cfg(tmp_path, cfg, "rel.json"))
    assert loaded["data"]["path"] == str(tmp_path / "d" / "data.csv")
    assert main(["train", "--config", str(tmp_path / "rel.json"), "--out", str(tmp_path / "t")]) == 0


def test_workers_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("FRAPPE_KIT_WORKERS", "2")
    assert run(tmp_path, "synth", BASE_CFG, "w") == 0
    assert json.loads((tmp_path / "w" / "manifest.json").read_text())["workers"] == 2


def test_manifest_timing_is_the_only_varying_field(tmp_path):
    assert run(tmp_path, "train", BASE_CFG, "m1") == 0
    assert run(tmp_path, "train", BASE_CFG, "m2") == 0
    a = json.loads((tmp_path / "m1" / "manifest.json").read_text())
    b = json.loads((tmp_path / "m2" / "manifest.json").read_text())
    a.pop("timing"), b.pop("timing")
    assert a == b
    assert (tmp_path / "m1" / "model.json").read_bytes() == (tmp_path / "m2" / "model.json").read_bytes()
