import json
import os

import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from conftest import small_experiment
from dnt_bench.cli import cli
from dnt_bench.config import config_to_dict


def write_config(tmp_path, **sections):
    config = small_experiment(tmp_path, **sections)
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump(config_to_dict(config)), encoding="utf-8")
    return str(path)


def invoke(*args):
    return CliRunner().invoke(cli, list(args))


@pytest.fixture
def config_path(tmp_path):
    return write_config(tmp_path)


def manifest(run_dir):
    with open(os.path.join(run_dir, "run_state.json"), encoding="utf-8") as f:
        return json.load(f)


def test_version():
    result = invoke("--version")
    assert result.exit_code == 0
    assert "dnt" in result.output


def test_gen_data_writes_every_cell_and_step(tmp_path, config_path):
    out = str(tmp_path / "run")
    result = invoke("gen-data", "--config", config_path, "--out", out, "--log-level", "WARNING")
    assert result.exit_code == 0, result.output
    assert "1800 rows written" in result.output
    assert len(pd.read_csv(os.path.join(out, "traffic.csv"))) == 1800
    state = manifest(out)
    assert state["files"]["gen-data"] == ["traffic.csv"]
    assert state["config"]["seed"] == 7


def test_seed_flag_overrides_the_config(tmp_path, config_path):
    out = str(tmp_path / "run")
    assert invoke("gen-data", "--config", config_path, "--out", out, "--seed", "3").exit_code == 0
    assert manifest(out)["config"]["seed"] == 3


def test_cluster_writes_the_assignment(tmp_path, config_path):
    out = str(tmp_path / "run")
    result = invoke("cluster", "--config", config_path, "--out", out)
    assert result.exit_code == 0, result.output
    clusters = pd.read_csv(os.path.join(out, "clusters.csv"))
    assert clusters["cell_id"].tolist() == list(range(9))
    assert set(clusters["cluster"]) == {0, 1}


def test_htwin_requires_vtwin_checkpoints(tmp_path, config_path):
    result = invoke("htwin", "--config", config_path, "--out", str(tmp_path / "run"))
    assert result.exit_code != 0
    assert "run the vtwin subcommand first" in result.output


def test_invalid_log_level_is_a_usage_error(tmp_path, config_path):
    result = invoke("gen-data", "--config", config_path, "--out", str(tmp_path / "run"), "--log-level", "LOUD")
    assert result.exit_code == 2


def test_config_errors_name_the_key(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("fedsync:\n  rounds: -1\n", encoding="utf-8")
    result = invoke("gen-data", "--config", str(path), "--out", str(tmp_path / "run"))
    assert result.exit_code == 1
    assert "fedsync.rounds" in result.output


def test_report_of_an_empty_directory_fails(tmp_path):
    result = invoke("report", str(tmp_path))
    assert result.exit_code == 1
    assert "run_state.json" in result.output


def test_report_of_an_unreadable_manifest_fails_cleanly(tmp_path):
    (tmp_path / "run_state.json").mkdir()
    result = invoke("report", str(tmp_path))
    assert result.exit_code == 1
    assert "cannot read" in result.output


def test_report_maps_io_errors_to_an_exit_code(tmp_path, monkeypatch):
    def denied(run_dir):
        raise PermissionError(f"permission denied: {run_dir}")

    monkeypatch.setattr("dnt_bench.cli.write_report", denied)
    result = invoke("report", str(tmp_path))
    assert result.exit_code == 1
    assert "I/O error: permission denied" in result.output


def test_cache_sim_with_traces(tmp_path, config_path):
    out = str(tmp_path / "run")
    result = invoke("cache-sim", "--config", config_path, "--out", out, "--trace")
    assert result.exit_code == 0, result.output
    assert "ReliableRL+DNT" in result.output
    frame = pd.read_csv(os.path.join(out, "cache_sim.csv"))
    assert len(frame) == 6
    assert "cache_trace_lfu.csv" in manifest(out)["files"]["cache-sim"]


def run_lifecycle(out, config_path):
    for command in ("gen-data", "vtwin", "htwin", "attack-eval"):
        result = invoke(command, "--config", config_path, "--out", out)
        assert result.exit_code == 0, result.output
    result = invoke("report", out)
    assert result.exit_code == 0, result.output


def test_lifecycle_reports_one_cost_reduction(tmp_path, config_path):
    out = str(tmp_path / "run")
    run_lifecycle(out, config_path)

    ledgers = manifest(out)["ledgers"]
    assert ledgers["htwin"]["role"] == "candidate"
    assert ledgers["centralized-maintenance"]["role"] == "baseline"
    assert ledgers["vtwin"]["role"] is None

    with open(os.path.join(out, "summary.txt"), encoding="utf-8") as f:
        text = f.read()
    assert text.count("cost_reduction ") == 1
    assert "cost_reduction htwin vs centralized-maintenance:" in text
    with open(os.path.join(out, "summary.json"), encoding="utf-8") as f:
        summary = json.load(f)
    assert len(summary["attack_eval"]) == 24
    assert set(summary["quality"]) == {"vtwin", "htwin"}
    assert [row["model"] for row in summary["quality"]["vtwin"]] == ["vtwin", "centralized"]


def test_no_cluster_ablation_writes_its_own_artifacts(tmp_path, config_path):
    out = str(tmp_path / "run")
    for command in ("vtwin", "htwin"):
        result = invoke(command, "--config", config_path, "--out", out, "--no-cluster")
        assert result.exit_code == 0, result.output
    assert os.path.exists(os.path.join(out, "vtwin_nocluster_c0.ckpt"))
    assert os.path.exists(os.path.join(out, "htwin_nocluster_c0.ckpt"))
    quality = pd.read_csv(os.path.join(out, "quality_htwin.csv"))
    assert quality["model"].tolist() == ["htwin", "htwin_nocluster"]
    assert manifest(out)["ledgers"]["htwin-nocluster"]["role"] is None


def test_reruns_are_byte_identical(tmp_path, config_path):
    first = str(tmp_path / "a" / "run")
    second = str(tmp_path / "b" / "run")
    run_lifecycle(first, config_path)
    run_lifecycle(second, config_path)

    names = sorted(n for n in os.listdir(first) if n != "run_state.json")
    assert names == sorted(n for n in os.listdir(second) if n != "run_state.json")
    assert "summary.json" in names and "htwin_c0.ckpt" in names
    for name in names:
        with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
            assert a.read() == b.read(), name
