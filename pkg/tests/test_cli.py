import json
import os

import pytest

from cli import dispatch
from configuration import OUTPUT_ENV_VAR
from scenario_io import read_json

from conftest import DESK


def _load(directory, name):
    return read_json(os.path.join(str(directory), name))


def test_usage_errors_exit_with_two():
    assert dispatch([]) == 2
    assert dispatch(["model", "--bogus", DESK]) == 2
    assert dispatch(["simulate", DESK, "--strategy", "sideways"]) == 2
    assert dispatch(["synth", DESK, "--uncertainty", "ka=1.5"]) == 2


def test_model_command_writes_model_and_manifest(tmp_path):
    assert dispatch(["model", DESK, "-e", "1", "-o", str(tmp_path), "-q"]) == 0
    model = _load(tmp_path, "model.json")
    assert (model["n"], model["m"]) == (16, 2)
    assert model["event_id"] == "ev2"
    assert model["switch"] == "ssw1"
    assert model["a_dn"]["rows"] == 16
    manifest = _load(tmp_path, "manifest.json")
    paths = [item["path"] for item in manifest["files"]]
    assert {"model.json", "eig_G_ol.csv"} <= set(paths)
    assert "run.log" not in paths
    assert "run_report.json" not in paths
    report = _load(tmp_path, "run_report.json")
    assert report["command"] == "model"
    assert len(report["input_digest"]) == 64


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV_VAR, str(tmp_path / "env_out"))
    assert dispatch(["model", DESK, "-q"]) == 0
    assert os.path.exists(tmp_path / "env_out" / "model.json")


def test_failures_exit_with_one(tmp_path):
    assert dispatch(["model", str(tmp_path / "missing.json"), "-o", str(tmp_path / "a"), "-q"]) == 1
    assert dispatch(["model", DESK, "-e", "9", "-o", str(tmp_path / "b"), "-q"]) == 1
    assert dispatch(["metrics", str(tmp_path / "missing.csv"), "-o", str(tmp_path / "c"), "-q"]) == 1


def test_metrics_are_reproducible_from_the_trace(tmp_path, capsys):
    sim_dir, metrics_dir = tmp_path / "sim", tmp_path / "metrics"
    argv = ["simulate", DESK, "--strategy", "feedback-only", "--dt", "0.002", "--horizon", "2", "-o", str(sim_dir), "-q"]
    assert dispatch(argv) == 0
    assert dispatch(["metrics", str(sim_dir / "trace.csv"), "-o", str(metrics_dir), "-q"]) == 0
    assert _load(metrics_dir, "metrics.json") == _load(sim_dir, "metrics.json")

    headline = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert headline["dv_pk_max"] == _load(sim_dir, "metrics.json")["dv_pk_max"]

    report = _load(sim_dir, "run_report.json")
    assert report["strategy"] == "feedback-only"
    assert [ev["event_id"] for ev in report["events"]] == ["ev1", "ev2", "ev3", "ev4", "ev5"]
    assert os.path.exists(sim_dir / "synth_ev1.json")


@pytest.mark.slow
def test_synth_without_uncertainty_uses_the_nominal_model(tmp_path):
    argv = ["synth", DESK, "-e", "1", "--uncertainty", "ka=0,lf=0,sr=0", "-o", str(tmp_path), "-q"]
    assert dispatch(argv) == 0
    document = _load(tmp_path, "synth_ev2.json")
    assert document["certificate"]["vertices"] == ["nominal"]
    assert document["verification"]["passed"]
    assert document["certificate"]["hinf_bound"] > 0


@pytest.mark.slow
def test_simulate_both_strategies_writes_one_directory_per_run(tmp_path):
    argv = ["simulate", DESK, "--strategy", "both", "--delay", "0,0.2", "--dt", "0.002", "--horizon", "2", "-o", str(tmp_path), "-q"]
    assert dispatch(argv) == 0
    for name in ("feedback-only", "proposed_td0", "proposed_td0.2"):
        assert os.path.exists(tmp_path / name / "metrics.json")


def _bytes(directory, name):
    with open(os.path.join(str(directory), name), "rb") as handle:
        return handle.read()


@pytest.mark.slow
def test_simulation_outputs_are_byte_reproducible(tmp_path):
    runs = [tmp_path / "first", tmp_path / "second"]
    for out in runs:
        argv = ["simulate", DESK, "--strategy", "proposed", "--dt", "0.002", "--horizon", "4", "-o", str(out), "-q"]
        assert dispatch(argv) == 0
    names = sorted(p.name for p in runs[0].glob("synth_ev*.json"))
    assert names == sorted(p.name for p in runs[1].glob("synth_ev*.json"))
    assert "synth_ev1.json" in names
    for name in ["trace.csv", "metrics.json", "manifest.json"] + names:
        assert _bytes(runs[0], name) == _bytes(runs[1], name), name
    certificate = _load(runs[0], "synth_ev1.json")
    assert "wall_time_s" not in certificate
    assert "wall_time_s" not in certificate["certificate"]
    report = _load(runs[0], "run_report.json")
    assert all("wall_time_s" in event for event in report["events"])


@pytest.mark.slow
def test_analyze_delay_sweep_stays_below_feedback_only(tmp_path):
    delays = (0.1, 0.2, 0.4, 0.6)
    argv = ["analyze", DESK, "-e", "0", "--delay", ",".join(f"{d:g}" for d in delays), "--points", "200", "-o", str(tmp_path), "-q"]
    assert dispatch(argv) == 0
    norms = _load(tmp_path, "norms.json")
    assert norms["delay_compensation"] is True
    assert norms["pade_modulus_error"] < 1e-12
    systems = norms["systems"]
    peaks = [systems[f"G_d_{d:g}"]["svp_peak"] for d in delays]
    for earlier, later in zip(peaks, peaks[1:]):
        assert later >= earlier * (1 - 5e-4)
    assert all(peak < systems["G_ol"]["svp_peak"] for peak in peaks)
    for d in delays:
        assert os.path.exists(tmp_path / f"svp_G_d_{d:g}.csv")
        assert os.path.exists(tmp_path / f"synth_ev1_td{d:g}.json")
