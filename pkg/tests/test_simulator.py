import dataclasses
import math
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest
import scipy.linalg
from numpy.testing import assert_allclose
from pandas.testing import assert_frame_equal

import simulator
from conftest import DESK, IEEE37
from configuration import SettleBand, SimulationSettings
from errors import IntegrationError, MetricsError, ValidationError
from fvc_synth import FvController
from scenario_io import parse_scenario
from simulator import (
    Metrics,
    ScenarioRunner,
    SwitchEvent,
    compute_metrics,
    delay_steps,
    discretize,
    event_windows,
    integrate_lti,
    run_scenario,
)


def _desk(desk_scenario, events, horizon=1.0, **changes):
    return dataclasses.replace(desk_scenario, events=list(events), horizon_s=horizon, **changes)


def _dv_columns(frame):
    return [c for c in frame.columns if c.startswith("dv_")]


# ---------------------------------------------------------------------------
# Integration


def test_scalar_decay_is_exact():
    segment = integrate_lti([[-1.0]], [[0.0]], [1.0], (0.0, 1.0), 0.1)
    assert segment.times[-1] == pytest.approx(1.0)
    assert segment.states[-1, 0] == pytest.approx(math.exp(-1.0), abs=1e-9)


def test_zero_input_from_rest_stays_at_rest(rng):
    a = -np.eye(3) + 0.1 * rng.standard_normal((3, 3))
    segment = integrate_lti(a, np.ones((3, 1)), np.zeros(3), (0.0, 2.0), 0.01)
    assert np.all(segment.states == 0.0)


def test_step_response_matches_closed_form():
    a = np.array([[-1.0, 2.0], [0.0, -3.0]])
    b = np.array([[0.0], [1.0]])
    segment = integrate_lti(a, b, np.zeros(2), (0.0, 2.0), 0.05, u=[1.0])
    for t, x in zip(segment.times[::10], segment.states[::10]):
        expected = np.linalg.solve(a, (scipy.linalg.expm(a * t) - np.eye(2)) @ b).ravel()
        assert_allclose(x, expected, atol=1e-12)


def test_discretization_of_integrator():
    ad, bd = discretize(np.zeros((1, 1)), np.ones((1, 1)), 0.25)
    assert_allclose(ad, [[1.0]])
    assert_allclose(bd, [[0.25]])


def test_divergence_reports_the_step():
    with pytest.raises(IntegrationError) as info:
        integrate_lti([[50.0]], [[0.0]], [1.0], (0.0, 100.0), 1.0)
    assert info.value.step > 1


@pytest.mark.parametrize("delay, dt, steps", [(0.2, 1e-3, 200), (0.0, 1e-3, 0), (0.0015, 0.001, 2)])
def test_delay_steps(delay, dt, steps):
    assert delay_steps(delay, dt) == steps


# ---------------------------------------------------------------------------
# Scenario runs


def test_events_must_be_ordered(desk_scenario):
    events = [SwitchEvent(2.0, "tsw1", "close"), SwitchEvent(1.0, "ssw1", "open")]
    with pytest.raises(ValidationError, match="event 1.*event 0"):
        ScenarioRunner(_desk(desk_scenario, events))


def test_no_events_is_a_quiet_run(desk_scenario):
    trace = run_scenario(_desk(desk_scenario, [], horizon=0.5), strategy="feedback-only")
    frame = trace.frame
    assert trace.reports == []
    assert frame["time_s"].iloc[-1] == pytest.approx(0.5)
    for col in _dv_columns(frame):
        assert np.max(np.abs(frame[col].to_numpy(dtype=float))) < 1e-9
    assert [w[0] for w in event_windows(frame)] == ["none"]


def test_closing_a_closed_switch_changes_nothing(desk_scenario):
    events = [SwitchEvent(0.5, "ssw1", "close")]
    trace = run_scenario(_desk(desk_scenario, events), strategy="feedback-only")
    for col in _dv_columns(trace.frame):
        assert np.max(np.abs(trace.column(col))) < 1e-8
    (report,) = trace.reports
    assert report.event_id == "ev1"
    assert report.settled


def test_feedforward_waits_for_the_delay(desk_scenario, monkeypatch):
    def fake_synthesize(builder, spec, settings, threads=1):
        model = builder.build()
        fvc = FvController(-np.eye(model.n), np.ones(model.n), np.ones((model.m, model.n)))
        certificate = SimpleNamespace(to_dict=lambda: {})
        return SimpleNamespace(controller=fvc, certificate=certificate, verification=None)

    monkeypatch.setattr(simulator, "synthesize", fake_synthesize)
    t_event = 0.5
    scenario = _desk(desk_scenario, [SwitchEvent(t_event, "tsw1", "close")], delay_s=0.2)
    trace = run_scenario(scenario, strategy="proposed")
    t = trace.column("time_s")
    uff = trace.column("uff_sg1")
    assert np.max(np.abs(uff[t <= t_event + 0.2 + 1e-9])) < 1e-12
    assert np.max(np.abs(uff[t > t_event + 0.25])) > 0
    assert trace.delay_s == 0.2


def test_runs_are_deterministic(desk_scenario):
    scenario = _desk(desk_scenario, desk_scenario.events[:2], horizon=2.0)
    first = run_scenario(scenario, strategy="feedback-only")
    second = run_scenario(scenario, strategy="feedback-only")
    assert_frame_equal(first.frame, second.frame)


def test_event_markers_split_the_trace(desk_scenario):
    scenario = _desk(desk_scenario, desk_scenario.events[:2], horizon=2.0)
    trace = run_scenario(scenario, strategy="feedback-only")
    windows = event_windows(trace.frame)
    assert [w[0] for w in windows] == ["ev1", "ev2"]
    assert trace.frame["time_s"].iloc[windows[0][1]] == pytest.approx(desk_scenario.events[0].time)
    assert np.all(np.diff(trace.column("time_s")) > 0)


def test_restored_bus_appears_after_its_event(desk_scenario):
    scenario = _desk(desk_scenario, desk_scenario.events[:1], horizon=1.0)
    trace = run_scenario(scenario, strategy="feedback-only")
    t = trace.column("time_s")
    vbus = trace.column("vbus_b3")
    assert np.all(np.isnan(vbus[t < desk_scenario.events[0].time]))
    assert np.all(np.isfinite(vbus[t >= desk_scenario.events[0].time]))
    assert trace.reports[0].restored_buses == ("b3",)


# ---------------------------------------------------------------------------
# Metrics


def _frame(t, v, events=None):
    data = {"time_s": t, "vbus_b1": v}
    if events is not None:
        data["event"] = events
    return pd.DataFrame(data)


def test_constant_trace_has_no_swing():
    t = np.linspace(0.0, 1.0, 101)
    metrics = compute_metrics(_frame(t, np.full(t.size, -0.03)))
    assert metrics.dv_rms_avg == pytest.approx(0.03)
    assert metrics.dv_pk_max == 0.0
    assert metrics.dt_set_max == 0.0
    assert list(metrics.per_event) == ["none"]


def test_sine_peak_to_peak():
    t = np.linspace(0.0, 1.0, 1001)
    metrics = compute_metrics(_frame(t, 0.02 * np.sin(2 * np.pi * 5 * t)))
    assert metrics.dv_pk_max == pytest.approx(0.04, rel=1e-9)
    assert metrics.dv_rms_avg == pytest.approx(0.02 / math.sqrt(2), rel=1e-3)


def test_exponential_settling_time():
    dt = 1e-3
    t = np.arange(0.0, 20.0 + dt / 2, dt)
    metrics = compute_metrics(_frame(t, np.exp(-t)), SettleBand(rel=0.02, floor=0.0))
    assert metrics.dt_set_max == pytest.approx(math.log(50.0), abs=2 * dt)


def test_metrics_ignore_time_origin():
    t = np.linspace(0.0, 5.0, 501)
    v = 0.01 * np.exp(-t) * np.cos(4 * t)
    base = compute_metrics(_frame(t, v))
    shifted = compute_metrics(_frame(t + 100.0, v))
    assert shifted.dv_rms_avg == pytest.approx(base.dv_rms_avg, rel=1e-12)
    assert shifted.dv_pk_max == pytest.approx(base.dv_pk_max, rel=1e-12)
    assert shifted.dt_set_max == pytest.approx(base.dt_set_max, abs=1e-9)


def test_windows_follow_event_markers():
    t = np.linspace(0.0, 2.0, 201)
    v = np.where(t < 1.0, 0.0, 0.01)
    events = np.full(t.size, "", dtype=object)
    events[0], events[100] = "ev1", "ev2"
    metrics = compute_metrics(_frame(t, v, events))
    assert list(metrics.per_event) == ["ev1", "ev2"]
    assert metrics.per_event["ev2"]["t_event"] == pytest.approx(1.0)
    assert metrics.per_event["ev1"]["dv_pk_max"] == 0.0
    assert metrics.per_event["ev2"]["dv_rms_avg"] == pytest.approx(0.01)


def test_metrics_document_round_trip():
    t = np.linspace(0.0, 1.0, 51)
    metrics = compute_metrics(_frame(t, 0.01 * t))
    assert Metrics.from_dict(metrics.to_dict()) == metrics


def test_metrics_reject_short_input():
    with pytest.raises(MetricsError):
        compute_metrics(pd.DataFrame({"time_s": [], "vbus_b1": []}))
    events = np.array(["ev1", "", "ev2"], dtype=object)
    with pytest.raises(MetricsError, match="ev2"):
        compute_metrics(_frame(np.array([0.0, 0.1, 0.2]), np.zeros(3), events))


# ---------------------------------------------------------------------------
# Proposed against feedback-only on the desk feeder (three feeder buses plus the slack)


@pytest.fixture(scope="module")
def desk_full_runs():
    """Full desk scenario: feedback-only once, proposed at every studied delay."""

    scenario = parse_scenario(DESK)
    runs = {"feedback-only": run_scenario(scenario, strategy="feedback-only")}
    for delay in (0.0, 0.1, 0.2, 0.4, 0.6):
        runs[delay] = run_scenario(scenario, strategy="proposed", delay_s=delay)
    return runs


@pytest.mark.slow
@pytest.mark.parametrize("index, action", [(0, "close"), (1, "open")])
def test_feedforward_reduces_terminal_swing(desk_scenario, index, action):
    event = desk_scenario.events[index]
    assert event.action == action
    scenario = _desk(desk_scenario, [event], horizon=5.0)
    settings = SimulationSettings(dt=1e-3, horizon=5.0)
    proposed = run_scenario(scenario, strategy="proposed", simulation=settings)
    baseline = run_scenario(scenario, strategy="feedback-only", simulation=settings)
    assert not proposed.reports[0].fallback
    ours, theirs = compute_metrics(proposed), compute_metrics(baseline)
    assert ours.dv_rms_avg < theirs.dv_rms_avg
    assert ours.dv_pk_max < theirs.dv_pk_max


@pytest.mark.slow
@pytest.mark.parametrize("delay", [0.0, 0.1, 0.2, 0.4, 0.6])
def test_feedforward_rms_dominates_every_event(desk_full_runs, delay):
    baseline = compute_metrics(desk_full_runs["feedback-only"]).per_event
    proposed = compute_metrics(desk_full_runs[delay]).per_event
    assert list(proposed) == list(baseline)
    for event_id, stats in baseline.items():
        assert proposed[event_id]["dv_rms_avg"] < stats["dv_rms_avg"], (event_id, delay)


@pytest.mark.slow
def test_every_desk_event_settles(desk_full_runs):
    for name, trace in desk_full_runs.items():
        assert [r.event_id for r in trace.reports] == ["ev1", "ev2", "ev3", "ev4", "ev5"]
        for report in trace.reports:
            assert not report.fallback, (name, report.event_id)
            assert report.derivative_norm < 1e-6, (name, report.event_id, report.derivative_norm)


@pytest.mark.slow
def test_feedforward_hands_over_to_the_same_steady_state(desk_scenario):
    scenario = _desk(desk_scenario, desk_scenario.events[1:2], horizon=10.0)
    proposed = run_scenario(scenario, strategy="proposed")
    baseline = run_scenario(scenario, strategy="feedback-only")
    for col in _dv_columns(baseline.frame):
        assert proposed.column(col)[-1] == pytest.approx(baseline.column(col)[-1], abs=1e-6)


def test_runner_reports_the_profiled_demand():
    runner = ScenarioRunner(parse_scenario(IEEE37))
    loads = runner.profiles.loads
    for t in (0.0, 2.5):
        expected = runner.profiles.sample([t], loads)[0]
        levels = runner.load_levels(t)
        assert list(levels) == list(loads)
        assert [levels[ld] for ld in loads] == pytest.approx([1.0 + v for v in expected])


def test_runner_without_profiles_is_at_rated_demand(desk_runner):
    assert desk_runner.load_levels(5.0) == {}
