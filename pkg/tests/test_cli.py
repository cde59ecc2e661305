"""Config round trips, validation, presets, orchestration, determinism."""
import dataclasses
import io
import json
from pathlib import Path

import pytest

from stackmf.cli import (
    CSV_COLUMNS,
    ScenarioConfig,
    build_objects,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    main,
    presets,
    resolve_threads,
    run_experiment,
    save_config,
    validate_config,
)
from stackmf.errors import ConfigError


def small_state_gap() -> ScenarioConfig:
    return dataclasses.replace(
        presets()["two-atom-delay-n1-1"], Ns=[4, 8, 16], reps=50, K=256,
        extras={"slope_tol": 0.45})


class TestRoundTrip:
    def test_every_preset_round_trips(self, tmp_path):
        for name, cfg in presets().items():
            path = tmp_path / f"{name}.json"
            save_config(cfg, path)
            assert load_config(path) == cfg

    def test_hash_stable_and_sensitive(self):
        cfg = small_state_gap()
        assert config_hash(cfg) == config_hash(small_state_gap())
        assert config_hash(cfg) != config_hash(
            dataclasses.replace(cfg, seed=cfg.seed + 1))

    def test_unknown_key_rejected(self):
        data = config_to_dict(small_state_gap())
        data["frobnicate"] = 1
        with pytest.raises(ConfigError, match="frobnicate"):
            config_from_dict(data)

    def test_missing_key_rejected(self):
        data = config_to_dict(small_state_gap())
        del data["delay_law"]
        with pytest.raises(ConfigError, match="delay_law"):
            config_from_dict(data)

    def test_parse_error_reports_position(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"name": "x",\n  "kind": }')
        with pytest.raises(ConfigError, match="line 2"):
            load_config(path)


class TestValidation:
    def test_presets_all_valid(self):
        for name, cfg in presets().items():
            assert validate_config(cfg) == [], name

    def test_low_q_blocks_rate_experiments(self):
        cfg = dataclasses.replace(small_state_gap(), q=3.0)
        errs = validate_config(cfg)
        assert any("q:" in e and "4" in e for e in errs)
        relaxed = dataclasses.replace(cfg, rate_assertions=False)
        assert validate_config(relaxed) == []

    def test_step_must_divide_spans(self):
        cfg = small_state_gap()
        bad = dataclasses.replace(cfg, model=dict(cfg.model, h=0.03, b=0.1))
        errs = validate_config(bad)
        assert any("does not divide the lag span" in e for e in errs)

    def test_all_violations_reported_not_just_first(self):
        cfg = small_state_gap()
        bad = dataclasses.replace(cfg, q=3.0, reps=10, K=10,
                                  model=dict(cfg.model, L=-1.0))
        errs = validate_config(bad)
        assert len(errs) >= 4

    def test_moment_order_capped_by_student_t_tail(self):
        cfg = presets()["degenerate-delay-n1-1"]
        bad = dataclasses.replace(cfg, q=5.0)
        assert any("df" in e for e in validate_config(bad))

    def test_delay_support_must_fit_lag_span(self):
        cfg = small_state_gap()
        bad = dataclasses.replace(
            cfg, delay_law={"family": "uniform", "lo": 0.1, "hi": 0.4})
        assert any("lag span" in e for e in validate_config(bad))

    def test_unknown_extras_key(self):
        cfg = dataclasses.replace(small_state_gap(),
                                  extras={"slope_tol": 0.4, "typo": 1})
        assert any("extras.typo" in e for e in validate_config(cfg))

    def test_epsilon_needs_deviations(self):
        cfg = presets()["epsilon-nash-n16"]
        bad = dataclasses.replace(cfg, extras={"kappa": 5.0})
        assert any("deviations" in e for e in validate_config(bad))

    def test_non_serializable_policy_family_rejected(self):
        cfg = small_state_gap()
        bad = dataclasses.replace(
            cfg, policies=dict(cfg.policies,
                               leader={"family": "custom", "params": {}}))
        assert any("policies.leader" in e for e in validate_config(bad))

    def test_single_population_kinds(self):
        cfg = presets()["epsilon-nash-n16"]
        assert any("single population" in e for e in validate_config(
            dataclasses.replace(cfg, Ns=[8, 16])))
        assert any("capped" in e for e in validate_config(
            dataclasses.replace(cfg, Ns=[128])))


class TestPresets:
    def test_regime_coverage(self):
        lib = presets()
        regimes = {cfg.regime for cfg in lib.values() if cfg.regime}
        assert {"degenerate_delta", "discrete_delta", "general",
                "sigma0_control_free", "linear_in_measure"} <= regimes
        kinds = {cfg.kind for cfg in lib.values()}
        assert "epsilon_nash" in kinds

    def test_build_objects_from_every_preset(self):
        for name, cfg in presets().items():
            model, policies, law = build_objects(cfg)
            assert model.grid.T == cfg.model["T"], name
            assert policies.leader.family == cfg.policies["leader"]["family"]


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    buf = io.StringIO()
    rc = run_experiment(small_state_gap(), out_dir=out, threads=1, stream=buf)
    return rc, out, buf.getvalue()


class TestRunExperiment:
    def test_exit_zero_and_artifacts(self, small_run):
        rc, out, text = small_run
        assert rc == 0
        for name in ("results.csv", "report.json", "manifest.json"):
            assert (out / name).exists()
        assert "verdict=pass" in text

    def test_csv_has_fixed_columns(self, small_run):
        _, out, _ = small_run
        header = (out / "results.csv").read_text().splitlines()[0]
        assert header == ",".join(CSV_COLUMNS)

    def test_report_and_manifest_contents(self, small_run):
        _, out, _ = small_run
        report = json.loads((out / "report.json").read_text())
        assert report["status"] == "ok"
        assert report["report"]["verdict"] == "pass"
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_sha256"] == config_hash(small_state_gap())
        assert manifest["master_seed"] == 5
        assert set(manifest["versions"]) == {"python", "numpy", "scipy",
                                             "stackmf"}

    def test_rerun_byte_identical(self, small_run, tmp_path):
        _, out, _ = small_run
        rc = run_experiment(small_state_gap(), out_dir=tmp_path / "b",
                            threads=1, stream=io.StringIO())
        assert rc == 0
        for name in ("results.csv", "report.json", "manifest.json"):
            assert (tmp_path / "b" / name).read_bytes() \
                == (out / name).read_bytes()

    def test_thread_count_does_not_change_bytes(self, small_run, tmp_path):
        _, out, _ = small_run
        rc = run_experiment(small_state_gap(), out_dir=tmp_path / "t3",
                            threads=3, stream=io.StringIO())
        assert rc == 0
        assert (tmp_path / "t3" / "results.csv").read_bytes() \
            == (out / "results.csv").read_bytes()

    def test_seed_override_changes_numbers(self, small_run, tmp_path):
        _, out, _ = small_run
        run_experiment(small_state_gap(), out_dir=tmp_path / "s",
                       threads=1, seed=99, stream=io.StringIO())
        assert (tmp_path / "s" / "results.csv").read_bytes() \
            != (out / "results.csv").read_bytes()
        manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
        assert manifest["master_seed"] == 99

    def test_dry_run_writes_nothing(self, tmp_path):
        out = tmp_path / "dry"
        buf = io.StringIO()
        rc = run_experiment(small_state_gap(), out_dir=out, dry_run=True,
                            stream=buf)
        assert rc == 0
        assert not out.exists()
        assert "scenario two-atom-delay-n1-1" in buf.getvalue()

    def test_invalid_config_exits_two(self, tmp_path):
        cfg = dataclasses.replace(small_state_gap(), q=3.0)
        buf = io.StringIO()
        rc = run_experiment(cfg, out_dir=tmp_path / "x", stream=buf)
        assert rc == 2
        assert "invalid-config" in buf.getvalue()

    def test_invalid_experiment_machine_readable(self, tmp_path):
        cfg = small_state_gap()
        cfg = dataclasses.replace(
            cfg, tol=1e-13,
            extras={"max_iter": 1},
            model=dict(cfg.model,
                       params=dict(cfg.model["params"], a1=0.4, k1=3.0)))
        buf = io.StringIO()
        rc = run_experiment(cfg, out_dir=tmp_path / "bad", stream=buf)
        assert rc == 2
        report = json.loads((tmp_path / "bad" / "report.json").read_text())
        assert report["status"] == "invalid"
        assert report["error_type"] == "ExperimentInvalidError"

    def test_failed_rate_assertion_exits_one(self, tmp_path):
        cfg = dataclasses.replace(small_state_gap(),
                                  regime="linear_in_measure",
                                  extras={"slope_tol": 0.001})
        buf = io.StringIO()
        rc = run_experiment(cfg, out_dir=tmp_path / "f", stream=buf)
        assert rc == 1
        report = json.loads((tmp_path / "f" / "report.json").read_text())
        assert report["status"] == "assertions_failed"


class TestThreadsResolution:
    def test_flag_wins(self, monkeypatch):
        monkeypatch.setenv("STACKMF_THREADS", "7")
        assert resolve_threads(2) == 2

    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv("STACKMF_THREADS", "3")
        assert resolve_threads(None) == 3

    def test_env_invalid(self, monkeypatch):
        monkeypatch.setenv("STACKMF_THREADS", "many")
        with pytest.raises(ConfigError):
            resolve_threads(None)

    def test_default_positive(self, monkeypatch):
        monkeypatch.delenv("STACKMF_THREADS", raising=False)
        assert resolve_threads(None) >= 1


class TestMain:
    def test_presets_list(self, capsys):
        assert main(["presets", "list"]) == 0
        text = capsys.readouterr().out
        for name in presets():
            assert name in text

    def test_presets_show(self, capsys):
        assert main(["presets", "show", "epsilon-nash-n16"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["kind"] == "epsilon_nash"
        assert main(["presets", "show", "nope"]) == 2

    def test_validate_file_and_preset_name(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        save_config(small_state_gap(), path)
        assert main(["validate", str(path)]) == 0
        assert main(["validate", "uniform-delay-n1-1"]) == 0
        capsys.readouterr()

    def test_validate_bad_file(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        data = config_to_dict(small_state_gap())
        data["q"] = 3.0
        path.write_text(json.dumps(data))
        assert main(["validate", str(path)]) == 2
        assert "invalid-config" in capsys.readouterr().err

    def test_run_dry_run_via_main(self, tmp_path, capsys):
        assert main(["run", "two-atom-delay-n1-1", "--dry-run",
                     "--out", str(tmp_path / "o")]) == 0
        assert "scenario two-atom-delay-n1-1" in capsys.readouterr().out
