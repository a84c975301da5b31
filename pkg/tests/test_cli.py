import json

import jsonschema
import pytest
from click.testing import CliRunner

from eqd.cli import EXIT_CONFIG, EXIT_INCOMPLETE, main
from eqd.config import dump_config, load_config
from eqd.experiment import lv3_paper
from eqd.optimize import Schedule
from eqd.symreg import SRConfig


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    cfg = lv3_paper(name="tiny", ensemble_size=2, horizon=5.0, training_ranges=(2.0,),
                    schedule=Schedule(adam_iters=20, lbfgs_iters=20),
                    sr=SRConfig.desk(n_populations=4, iterations=4))
    return dump_config(cfg, d / "tiny.yaml") and d / "tiny.yaml"


@pytest.fixture(scope="module")
def finished_run(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "run"
    res = CliRunner().invoke(main, ["run", "--config", str(tiny_config), "--out", str(out),
                                    "--jobs", "1", "--mode", "per-member", "--range-study"])
    assert res.exit_code == 0, res.output
    return out


def test_run_writes_artifacts(finished_run):
    for name in ["config.yaml", "dataset.csv", "dataset_clean.csv", "manifest.json",
                 "members/member_000.json", "members/member_001_telemetry.csv",
                 "ensemble/avg_inputs.csv", "ensemble/avg_targets.csv",
                 "discover/equations.json", "discover/frontier_y.json",
                 "discover/extrapolation.csv", "discover/sliding_rmse.csv",
                 "discover/coefficient_stats.json", "discover/range_study.json"]:
        assert (finished_run / name).exists(), name


def test_manifest_inventory(finished_run):
    man = json.loads((finished_run / "manifest.json").read_text())
    assert set(man["stages"]) == {"simulate", "train", "discover"}
    assert man["master_seed"] == 0 and len(man["config_hash"]) == 64
    assert "dataset.csv" in man["files"] and len(man["files"]["dataset.csv"]["sha256"]) == 64


def test_frontier_export_fields(finished_run):
    fr = json.loads((finished_run / "discover/frontier_y.json").read_text())
    assert fr and set(fr[0]) == {"complexity", "mse", "score", "infix", "canonical"}


def test_report_json_matches_schema(finished_run):
    from importlib import resources
    res = CliRunner().invoke(main, ["report", str(finished_run), "--format", "json"])
    assert res.exit_code == 0, res.output
    rep = json.loads(res.output)
    schema = json.loads(resources.files("eqd").joinpath("schemas/report.schema.json").read_text())
    jsonschema.validate(rep, schema)
    assert rep["equations"][0]["true"] == "-1*y + x*y - y*z"


def test_report_text(finished_run):
    res = CliRunner().invoke(main, ["report", str(finished_run)])
    assert res.exit_code == 0
    assert "dy/dt" in res.output and "-1*y + x*y - y*z" in res.output


def test_resume_is_noop(finished_run, tiny_config):
    res = CliRunner().invoke(main, ["train", "--config", str(tiny_config), "--out",
                                    str(finished_run), "--resume"])
    assert res.exit_code == 0 and "nothing to do" in res.output


def test_seed_mismatch_is_rejected(finished_run, tiny_config):
    res = CliRunner().invoke(main, ["simulate", "--config", str(tiny_config), "--out",
                                    str(finished_run), "--seed", "9"])
    assert res.exit_code == EXIT_CONFIG


def test_sr_budget_change_reuses_training(finished_run, tiny_config):
    from eqd.cli import run_key
    cfg = load_config(tiny_config)
    other = cfg.with_overrides(sr=SRConfig.paper())
    assert run_key(cfg) == run_key(other)


def test_incomplete_run(tmp_path):
    res = CliRunner().invoke(main, ["report", str(tmp_path)])
    assert res.exit_code == EXIT_INCOMPLETE
    assert "equations.json" in res.output


def test_schema_errors_name_fields(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("name: x\nsystem: {name: LotkaVolterra3}\nsimulation: {span: [0, 1]}\n"
                 "training: {bogus: 1}\n")
    res = CliRunner().invoke(main, ["simulate", "--config", str(p), "--out", str(tmp_path / "o")])
    assert res.exit_code == EXIT_CONFIG
    assert "simulation.sample_dt" in res.output and "training.bogus" in res.output


def test_presets_listing():
    res = CliRunner().invoke(main, ["presets"])
    assert res.output.split() == ["lorenz5-paper", "lv3-paper"]
    res = CliRunner().invoke(main, ["presets", "lv3-paper"])
    assert "LotkaVolterra3" in res.output


def test_default_run_dir_uses_env(tmp_path, monkeypatch, tiny_config):
    monkeypatch.setenv("EQD_OUT", str(tmp_path))
    res = CliRunner().invoke(main, ["simulate", "--config", str(tiny_config)])
    assert res.exit_code == 0, res.output
    (run,) = list(tmp_path.iterdir())
    assert run.name.startswith("tiny-") and len(run.name) == len("tiny-") + 12
