"""Spec parsing, overrides, artifact layout, and the small end-to-end
command paths."""

import json
from pathlib import Path

import numpy as np
import pytest

from energyformer.cli import (
    ExperimentSpec,
    SpecError,
    emit_plotdata,
    gp_variant_config,
    main,
    parse_variant,
    resolve_model_config,
    run_gp_regression,
    run_lr_sweep,
    spec_hash,
    task_dir_for,
)
from energyformer.data import DataError
from energyformer.model import count_parameters_config


def _write_spec(tmp_path, payload):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(payload))
    return str(path)


# ---------------------------------------------------------------------------
# spec handling


def test_spec_round_trip():
    spec = ExperimentSpec(
        task="count", seeds=(0, 1), out="x",
        task_options={"models": ["ref-86m", "cem-86m"]},
    )
    again = ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec


def test_spec_requires_version_and_task():
    with pytest.raises(SpecError, match="version"):
        ExperimentSpec.from_dict({"task": "count"})
    with pytest.raises(SpecError, match="task"):
        ExperimentSpec.from_dict({"version": 1})
    with pytest.raises(SpecError, match="unknown spec field"):
        ExperimentSpec.from_dict({"version": 1, "task": "count", "tsak": 1})


def test_spec_validation_messages():
    with pytest.raises(SpecError, match="task: must be one of"):
        ExperimentSpec(task="nope").validate()
    with pytest.raises(SpecError, match="seeds"):
        ExperimentSpec(task="count", seeds=()).validate()
    with pytest.raises(SpecError, match="seeds: duplicate"):
        ExperimentSpec(task="count", seeds=(1, 1)).validate()
    with pytest.raises(SpecError, match="optim"):
        ExperimentSpec(task="count", optim={"lr": -1}).validate()
    with pytest.raises(SpecError, match="model"):
        ExperimentSpec(task="count", model={"kind": "banana"}).validate()
    with pytest.raises(SpecError, match="data"):
        ExperimentSpec(task="gp-regression", data={"kernel": "sincos"}).validate()


def test_spec_hash_ignores_placement_fields():
    a = ExperimentSpec(task="count", seeds=(0,), out="runs-a")
    b = ExperimentSpec(task="count", seeds=(1, 2), out="runs-b")
    c = ExperimentSpec(task="count", task_options={"seq_len": 64})
    assert spec_hash(a) == spec_hash(b)
    assert spec_hash(a) != spec_hash(c)


def test_preset_payload_with_overrides():
    cfg = resolve_model_config({"preset": "lm-smoke", "block": {"d_hidden": 32}})
    assert cfg.block.d_hidden == 32
    assert cfg.block.attention == "cem"  # preset fields survive the merge
    with pytest.raises(Exception):
        resolve_model_config({"preset": "no-such-preset"})


def test_variant_parsing():
    assert parse_variant("plain") == ("plain", 1, 1.5)
    assert parse_variant("gated") == ("gated", 1, 1.0)
    assert parse_variant("cem-t1") == ("cem", 1, 1.0)
    assert parse_variant("cem-t4") == ("cem", 4, 1.0)
    for bad in ("cem-t0", "cem-tx", "extra"):
        with pytest.raises(SpecError):
            parse_variant(bad)


def test_variant_parameter_relationships():
    gated = count_parameters_config(gp_variant_config("gated", 32, 128, 2, 10))
    t1 = count_parameters_config(gp_variant_config("cem-t1", 32, 128, 2, 10))
    t2 = count_parameters_config(gp_variant_config("cem-t2", 32, 128, 2, 10))
    plain = count_parameters_config(gp_variant_config("plain", 32, 128, 2, 10))
    assert 3 * t1["mlp_core"] == 2 * gated["mlp_core"]  # the 2/3 core ratio
    assert t1 == t2  # recursion adds no parameters
    assert plain["mlp_core"] == gated["mlp_core"]  # width-matched baseline


# ---------------------------------------------------------------------------
# entry point


def test_cli_invalid_spec_exits_2(tmp_path, capsys):
    bad = _write_spec(tmp_path, {"version": 1, "task": "wat"})
    assert main(["--spec", bad]) == 2
    assert "task" in capsys.readouterr().err


def test_cli_missing_file_exits_2(tmp_path, capsys):
    assert main(["--spec", str(tmp_path / "nope.json")]) == 2
    assert "invalid spec" in capsys.readouterr().err


def test_cli_malformed_json_exits_2(tmp_path, capsys):
    path = tmp_path / "spec.json"
    path.write_text("{not json")
    assert main(["--spec", str(path)]) == 2


def test_cli_bad_override_exits_2(tmp_path, capsys):
    spec = _write_spec(tmp_path, {"version": 1, "task": "count"})
    assert main(["--spec", spec, "--set", "no-equals-sign"]) == 2
    assert main(["--spec", spec, "--set", "optim.lr=-3"]) == 2
    assert main(["--spec", spec, "--seeds", "1,two"]) == 2
    assert main(["--spec", spec, "--jobs", "0"]) == 2


def test_cli_count_end_to_end(tmp_path, capsys):
    spec = _write_spec(tmp_path, {
        "version": 1, "task": "count", "out": str(tmp_path / "runs"),
        "task_options": {"models": ["ref-86m", "cem-86m"], "seq_len": 64},
    })
    assert main(["--spec", spec]) == 0
    out = capsys.readouterr().out
    assert "attention_core: 1/2" in out
    assert "mlp_core: 2/3" in out
    run_dirs = list((tmp_path / "runs").glob("count-*"))
    assert len(run_dirs) == 1
    report = json.loads((run_dirs[0] / "count.json").read_text())
    assert report["ratios"]["attention_core"]["exact"] == "1/2"
    assert report["ratios"]["mlp_core"]["exact"] == "2/3"
    assert (run_dirs[0] / "count.csv").exists()


def test_cli_effective_config_round_trips(tmp_path):
    spec = _write_spec(tmp_path, {
        "version": 1, "task": "count", "out": str(tmp_path / "runs"),
    })
    assert main(["--spec", spec, "--set", "task_options.seq_len=32"]) == 0
    run_dir = next((tmp_path / "runs").glob("count-*"))
    payload = json.loads((run_dir / "effective-config.json").read_text())
    again = ExperimentSpec.from_dict(payload)
    again.validate()
    assert again.task_options["seq_len"] == 32
    assert spec_hash(again) == run_dir.name.split("-")[-1]


def test_cli_overrides_reach_nested_fields(tmp_path):
    spec = _write_spec(tmp_path, {
        "version": 1, "task": "lm-smoke", "out": str(tmp_path / "runs"),
        "data": {"seq_len": 17},
        "model": {"preset": "lm-smoke", "block": {"d_hidden": 16, "n_heads": 2,
                                                  "d_mlp": 32, "attn_precond_rank": 2,
                                                  "mlp_precond_rank": 2}},
        "optim": {"total_steps": 4, "batch_size": 4},
    })
    assert main(["--spec", spec, "--set", "optim.total_steps=2",
                 "--seeds", "7"]) == 0
    run_dir = next((tmp_path / "runs").glob("lm-smoke-*"))
    payload = json.loads((run_dir / "effective-config.json").read_text())
    assert payload["optim"]["total_steps"] == 2
    assert payload["seeds"] == [7]
    result = json.loads((run_dir / "seed7" / "result.json").read_text())
    assert np.isfinite(result["final_train_loss"])
    assert (run_dir / "seed7" / "model.bin").exists()


def test_gp_task_writes_paired_artifacts(tmp_path):
    spec = ExperimentSpec(
        task="gp-regression", seeds=(0, 1), out=str(tmp_path / "runs"),
        data={"kernel": "rbf", "n_points": 60},
        optim={"lr": 3e-3, "total_steps": 6, "batch_size": 48,
               "weight_decay": 0.0},
        task_options={"d_hidden": 8, "d_mlp": 16,
                      "variants": ["gated", "cem-t1", "cem-t2"]},
    )
    out = run_gp_regression(spec)
    task_dir = Path(out["dir"])
    rows = json.loads((task_dir / "gp-results.json").read_text())
    assert len(rows) == 6  # 2 seeds x 3 variants
    by_seed = {(r["seed"], r["variant"]): r for r in rows}
    assert by_seed[(0, "cem-t1")]["total_params"] == by_seed[(0, "cem-t2")]["total_params"]
    lines = (task_dir / "results.csv").read_text().splitlines()
    assert lines[0].startswith("seed,variant,steps")
    assert len(lines) == 7
    # per-seed data files exist and differ between seeds
    d0 = (task_dir / "seed0" / "data.csv").read_text()
    d1 = (task_dir / "seed1" / "data.csv").read_text()
    assert d0 != d1
    plot = (task_dir / "plot-steps-vs-rmse.csv").read_text().splitlines()
    assert plot[0] == "variant,steps,seed,rmse_test"
    assert sum(1 for line in plot if ",mean," in line) == 3


def test_gp_task_deterministic_per_seed(tmp_path):
    results = []
    for tag in ("a", "b"):
        spec = ExperimentSpec(
            task="gp-regression", seeds=(3,), out=str(tmp_path / tag),
            data={"kernel": "matern", "n_points": 50},
            optim={"lr": 3e-3, "total_steps": 5, "batch_size": 40,
                   "weight_decay": 0.0},
            task_options={"d_hidden": 8, "d_mlp": 16, "variants": ["cem-t1"]},
        )
        results.append(run_gp_regression(spec)["rows"][0]["rmse_test"])
    assert results[0] == results[1]


def test_lr_sweep_produces_argmin_annotation(tmp_path):
    spec = ExperimentSpec(
        task="lr-sweep", seeds=(0,), out=str(tmp_path / "runs"),
        data={"seq_len": 17},
        model={"kind": "lm", "vocab_size": 256, "n_layers": 1,
               "block": {"d_hidden": 16, "n_heads": 2, "d_mlp": 32}},
        optim={"total_steps": 3, "batch_size": 4},
        task_options={"n_points": 5, "low": 1e-3, "high": 8e-3},
    )
    out = run_lr_sweep(spec)
    assert len(out["points"]) == 5
    assert "best_lr" in out
    task_dir = Path(out["dir"])
    plot = (task_dir / "plot-lr-vs-loss.csv").read_text().splitlines()
    assert plot[0] == "lr,loss,kind"
    assert plot[-1].endswith("akima-argmin")
    assert len(plot) == 7  # header + 5 samples + argmin


def test_verify_task_end_to_end(tmp_path, capsys):
    spec = _write_spec(tmp_path, {
        "version": 1, "task": "verify", "out": str(tmp_path / "runs"),
        "task_options": {"fast": True},
    })
    assert main(["--spec", spec]) == 0
    out = capsys.readouterr().out
    assert "ok" in out and "FAIL" not in out
    run_dir = next((tmp_path / "runs").glob("verify-*"))
    report = json.loads((run_dir / "verify.json").read_text())
    assert report["all_passed"] is True


# ---------------------------------------------------------------------------
# plot data


def test_emit_plotdata_errors(tmp_path):
    with pytest.raises(DataError, match="no metrics"):
        emit_plotdata(tmp_path)
    (tmp_path / "sweep-points.json").write_text("[]")
    with pytest.raises(DataError, match="empty metrics"):
        emit_plotdata(tmp_path)
    (tmp_path / "sweep-points.json").write_text(json.dumps([{"lr": 1e-3}]))
    with pytest.raises(DataError, match="missing metric key 'loss'"):
        emit_plotdata(tmp_path)


def test_emit_plotdata_single_point_passthrough(tmp_path):
    (tmp_path / "sweep-points.json").write_text(
        json.dumps([{"lr": 1e-3, "loss": 2.0}]))
    paths = emit_plotdata(tmp_path)
    lines = paths[0].read_text().splitlines()
    assert len(lines) == 2  # header + the single sample, no argmin row
    assert lines[1].endswith("sample")
