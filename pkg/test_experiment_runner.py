import json
import os

import numpy as np
import pytest

import main
from app.services.collision_engine import StageKind
from app.services.experiment_runner import (
    ConfigValidationError,
    config_hash,
    export_config,
    load_config,
    replay_export,
    run,
    run_batch,
    validate_config,
)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")

AMPLITUDE_DAMPING = {
    "kind": "extract",
    "name": "amplitude_damping",
    "gamma": 1.0,
    "model": {"type": "single", "jump": "sigma_minus"},
}


def _write(path, document) -> str:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle)
    return str(path)


def _verdict(bundle, name):
    return next(v for v in bundle.verdicts if v.name == name)


def test_shipped_configs_validate():
    names = sorted(f for f in os.listdir(CONFIG_DIR) if f.endswith(".json"))
    assert names
    for name in names:
        config = load_config(os.path.join(CONFIG_DIR, name))
        assert config.name


def test_validation_reports_every_bad_field():
    with pytest.raises(ConfigValidationError) as exc:
        validate_config({"kind": "extract", "name": "bad name", "gamma": -1.0})
    fields = {e.split(":")[0] for e in exc.value.errors}
    assert {"name", "gamma"} <= fields


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigValidationError) as exc:
        validate_config({**AMPLITUDE_DAMPING, "gama": 1.0})
    assert any(e.startswith("gama") for e in exc.value.errors)


def test_semantic_problems_are_collected():
    document = {
        "kind": "trajectory",
        "name": "broken",
        "model": {"type": "compiled", "samples": 3, "h_s": "no_such_operator"},
    }
    with pytest.raises(ConfigValidationError) as exc:
        validate_config(document)
    joined = " | ".join(exc.value.errors)
    assert "trajectory: required" in joined
    assert "seed:" in joined
    assert "model.h_s" in joined


def test_seed_override_satisfies_random_models():
    document = {"kind": "extract", "name": "compiled", "model": {"type": "compiled", "sites": 1}}
    with pytest.raises(ConfigValidationError):
        validate_config(document)
    assert validate_config(document, seed=3).seed == 3


def test_config_hash_ignores_key_order():
    a = validate_config(AMPLITUDE_DAMPING)
    b = validate_config(dict(reversed(list(AMPLITUDE_DAMPING.items()))))
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 64


def test_extract_run_passes_and_is_reproducible(tmp_path):
    config = validate_config(AMPLITUDE_DAMPING)
    first = run(config, out_dir=str(tmp_path / "first"))
    second = run(config, out_dir=str(tmp_path / "second"))
    assert first.passed
    assert first.exit_code == 0
    for name in ("extraction.csv", "summary.json"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()
    header = (tmp_path / "first" / "extraction.csv").read_text().splitlines()[0]
    assert header == "dt,frobenius_deviation,trace_defect,min_choi_eig"
    summary = json.loads((tmp_path / "first" / "summary.json").read_text())
    assert summary["provenance"]["config_hash"] == config_hash(config)
    assert summary["passed"] is True


def test_tight_tolerance_fails_without_raising(tmp_path):
    bundle = run(validate_config(AMPLITUDE_DAMPING), out_dir=str(tmp_path), tol_scale=1e-30)
    assert not bundle.passed
    assert bundle.exit_code == 1
    assert (tmp_path / "summary.json").exists()


def test_trajectory_run_tracks_semigroup(tmp_path):
    document = {
        "kind": "trajectory",
        "name": "decay",
        "gamma": 1.0,
        "model": {"type": "single", "h_s": "sigma_z"},
        "trajectory": {"t_final": 0.5, "dt": 0.0078125, "initial": "excited"},
    }
    bundle = run(validate_config(document), out_dir=str(tmp_path))
    assert bundle.passed
    table = bundle.tables["trajectory"]
    assert len(table.rows) == 65
    assert "excitation_s0_predicted" in table.columns
    assert _verdict(bundle, "trajectory_gap").value < 3e-3


def test_trajectory_requires_whole_number_of_steps():
    document = {
        "kind": "trajectory",
        "model": {"type": "single"},
        "trajectory": {"t_final": 1.0, "dt": 0.3},
    }
    with pytest.raises(ConfigValidationError) as exc:
        validate_config(document)
    assert any(e.startswith("trajectory") for e in exc.value.errors)


def test_pair_comparison_reproduces_lamb_shift(tmp_path):
    config = validate_config({"kind": "appendixA", "name": "pair", "gamma": 1.0, "lambdas": [1.0, [0.0, 1.0]]})
    bundle = run(config, out_dir=str(tmp_path))
    assert bundle.passed, [v.name for v in bundle.verdicts if not v.passed]
    assert _verdict(bundle, "lamb_shift_formula").value < 1e-12
    assert _verdict(bundle, "mcm_brick_stages").passed
    assert {"extraction_mcm", "extraction_cascade", "extraction_counter"} <= set(bundle.tables)


def test_splitting_variants_agree(tmp_path):
    config = load_config(os.path.join(CONFIG_DIR, "splitting_equivalence.json"))
    bundle = run(config, out_dir=str(tmp_path))
    assert bundle.passed
    assert len(bundle.tables["pairwise"].rows) == 3


def test_entangled_random_samples_each_get_checked(tmp_path):
    document = {
        "kind": "extract",
        "name": "entangled_random",
        "seed": 7,
        "model": {"type": "entangled", "sites": 2, "ancilla": {"kind": "random_parity"}, "samples": 2},
    }
    bundle = run(validate_config(document), out_dir=str(tmp_path))
    assert bundle.passed
    names = {v.name for v in bundle.verdicts}
    assert {"sample00.index_symmetry", "sample01.cross_block"} <= names


def test_batch_rejects_duplicate_names(tmp_path):
    config = validate_config(AMPLITUDE_DAMPING)
    with pytest.raises(ConfigValidationError):
        run_batch([config, config], str(tmp_path))


def test_export_of_mcm_brick_replays_exactly():
    config = validate_config({"kind": "appendixA", "name": "pair"})
    export = export_config(config, 0.0625)
    collisions = [s for s in export.stages if s.kind == StageKind.COLLISION]
    assert len(collisions) == 3
    assert [s.duration_fraction for s in collisions] == [0.5, 1.0, 0.5]
    assert replay_export(export) == 0.0


def test_export_of_cascade_keeps_sweep_order():
    document = {"kind": "extract", "name": "c4", "model": {"type": "cascade", "sites": 4}}
    export = export_config(validate_config(document), 0.01)
    assert [s.targets[0] for s in export.stages] == ["s0", "s1", "s2", "s3"]
    reversed_doc = {**document, "model": {**document["model"], "reversed": True}}
    export = export_config(validate_config(reversed_doc), 0.01)
    assert [s.targets[0] for s in export.stages] == ["s3", "s2", "s1", "s0"]


def test_export_of_entangled_model_starts_with_ancilla_unitary():
    config = load_config(os.path.join(CONFIG_DIR, "entangled_fast.json"))
    export = export_config(config, 0.01)
    assert export.stages[0].kind == StageKind.ANCILLA_UNITARY
    assert np.isclose(export.stages[0].angles[0], 0.6)
    assert [f.role for f in export.factors] == ["system", "system", "ancilla", "ancilla"]


def test_export_rejects_timestep_outside_regime():
    with pytest.raises(ConfigValidationError):
        export_config(validate_config(AMPLITUDE_DAMPING), 2.0)


def test_cli_exit_codes(tmp_path):
    good = _write(tmp_path / "good.json", AMPLITUDE_DAMPING)
    bad = _write(tmp_path / "bad.json", {**AMPLITUDE_DAMPING, "gamma": -1.0})
    out = tmp_path / "out"
    assert main.cli(["validate", good]) == main.EXIT_PASS
    assert main.cli(["run", bad, "--out", str(out)]) == main.EXIT_INVALID
    assert not out.exists()
    assert main.cli(["run", good, "--out", str(out)]) == main.EXIT_PASS
    assert (out / "summary.json").exists()
    assert main.cli(["run", good, "--out", str(out), "--tol-scale", "1e-30"]) == main.EXIT_TOLERANCE


def test_cli_export_writes_json(tmp_path):
    target = tmp_path / "gates.json"
    config = os.path.join(CONFIG_DIR, "pair_comparison.json")
    assert main.cli(["export", config, "--dt", "0.0625", "--out", str(target)]) == main.EXIT_PASS
    document = json.loads(target.read_text())
    assert document["name"] == "mcm"
    assert len(document["stages"]) == 3


def test_cli_batch_runs_each_config(tmp_path):
    first = _write(tmp_path / "a.json", {**AMPLITUDE_DAMPING, "name": "a"})
    second = _write(tmp_path / "b.json", {**AMPLITUDE_DAMPING, "name": "b", "gamma": 0.5})
    out = tmp_path / "batch"
    assert main.cli(["batch", first, second, "--out", str(out), "--workers", "2"]) == main.EXIT_PASS
    assert (out / "a" / "summary.json").exists()
    assert (out / "b" / "summary.json").exists()


def test_non_geometric_dt_sequence_runs(tmp_path):
    config = validate_config({**AMPLITUDE_DAMPING, "dt_sequence": [0.1, 0.05, 0.02]})
    bundle = run(config, out_dir=str(tmp_path))
    assert len(bundle.tables["extraction"].rows) == 3
    assert _verdict(bundle, "kossakowski").passed
