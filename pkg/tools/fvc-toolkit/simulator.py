"""Event-driven simulation of switching scenarios.

Every switch event gets its own model, linearized at the settled pre-event
operating point, and (for the proposed strategy) its own feedforward
controller. Between events the deviation system is integrated with an exact
zero-order-hold discretization. Unit states are carried across events by
label; the feedforward states restart at zero and their settled output is
handed over to the regulator integrator of each unit.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg

from configuration import STRATEGIES, SettleBand, SimulationSettings, SynthesisSettings
from errors import EventError, FvcToolkitError, IntegrationError, MetricsError, ParameterError, ValidationError
from fvc_synth import FvController, UncertaintySpec, synthesize
from netmodel import DnStateSpace, NetworkDescription, SwitchModelBuilder, build_admittance, solve_steady_state
from profiles import ProfileSet

logger = logging.getLogger(__name__)

ACTIONS = ("open", "close")
NO_EVENT = "none"


# ============================================================================
# Scenario
# ============================================================================

@dataclass(frozen=True)
class SwitchEvent:
    time: float
    switch: str
    action: str
    uncertainty: Optional[UncertaintySpec] = None
    gamma: Optional[float] = None


@dataclass
class Scenario:
    network: NetworkDescription
    events: List[SwitchEvent] = field(default_factory=list)
    name: str = "scenario"
    description: str = ""
    strategy: str = "proposed"
    delay_s: float = 0.0
    dt_s: float = 1e-3
    horizon_s: float = 10.0
    uncertainty: UncertaintySpec = field(default_factory=UncertaintySpec)
    gamma: Optional[float] = None
    profiles: Optional[ProfileSet] = None
    seed: int = 0
    version: str = "1.0"
    digest: str = ""                        # sha256 of the source document
    defaults: Tuple[str, ...] = ()          # top-level keys filled with built-in defaults

    def validate(self):
        if not self.dt_s > 0:
            raise ValidationError(f"dt_s must be > 0, got {self.dt_s}")
        if self.horizon_s < 10 * self.dt_s:
            raise ValidationError(f"horizon_s {self.horizon_s} is shorter than 10 steps of {self.dt_s} s")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy '{self.strategy}'")
        if self.delay_s < 0:
            raise ValidationError(f"delay_s must be >= 0, got {self.delay_s}")
        switches = {sw.id for sw in self.network.switches}
        for k, event in enumerate(self.events):
            if event.switch not in switches:
                raise ValidationError(f"event {k} references unknown switch '{event.switch}'")
            if event.action not in ACTIONS:
                raise ValidationError(f"event {k} has unknown action '{event.action}'")
            if event.time < 0:
                raise ValidationError(f"event {k} has negative time {event.time}")
            if k and event.time <= self.events[k - 1].time:
                raise ValidationError(
                    f"event {k} at t={event.time} s does not come after event {k - 1} at t={self.events[k - 1].time} s"
                )
        if self.profiles is not None:
            loads = {ld.id for ld in self.network.loads}
            unknown = sorted(set(self.profiles.loads) - loads)
            if unknown:
                raise ValidationError(f"profiles reference unknown loads: {', '.join(unknown)}")

    @staticmethod
    def event_id(index: int) -> str:
        return f"ev{index + 1}"

    @property
    def end_time(self) -> float:
        return (self.events[-1].time if self.events else 0.0) + self.horizon_s


# ============================================================================
# Integration
# ============================================================================

@dataclass
class LtiSegment:
    times: np.ndarray
    states: np.ndarray      # (steps + 1) x n
    inputs: np.ndarray      # (steps + 1) x p, held over [t_k, t_k+1)


def discretize(a: np.ndarray, b: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold pair from the exponential of [[A, B], [0, 0]] dt."""
    n, p = a.shape[0], b.shape[1]
    aug = np.zeros((n + p, n + p))
    aug[:n, :n] = a
    aug[:n, n:] = b
    phi = scipy.linalg.expm(aug * dt)
    return phi[:n, :n], phi[:n, n:]


def _input_samples(u, times: np.ndarray, p: int) -> np.ndarray:
    k = times.size
    if u is None:
        return np.zeros((k, p))
    if callable(u):
        return np.array([np.atleast_1d(u(t)) for t in times], dtype=float).reshape(k, p)
    u = np.asarray(u, dtype=float)
    if u.ndim <= 1 and u.size == p:
        return np.tile(u.reshape(1, p), (k, 1))
    u = u.reshape(-1, p)
    if u.shape[0] == k - 1:
        u = np.vstack([u, u[-1:]])
    if u.shape[0] != k:
        raise ParameterError(f"input has {u.shape[0]} samples, expected {k}")
    return u


def integrate_lti(a, b, x0, t_span: Tuple[float, float], dt: float, u=None) -> LtiSegment:
    """Exact response of dx/dt = A x + B u for u held constant over each step.

    ``u`` is None (zero), a constant vector, a callable u(t) or an array of
    samples, one per grid point.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if dt <= 0 or t1 < t0:
        raise ParameterError(f"invalid integration span [{t0}, {t1}] with dt={dt}")
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n = a.shape[0]
    b = np.asarray(b, dtype=float).reshape(n, -1)
    steps = int(round((t1 - t0) / dt))
    times = t0 + dt * np.arange(steps + 1)
    inputs = _input_samples(u, times, b.shape[1])

    if n:
        fastest = float(np.max(np.abs(np.linalg.eigvals(a))))
        if fastest > 0 and dt > 0.1 / fastest:
            logger.warning("dt=%.3g s is coarser than 0.1/|lambda|max=%.3g s", dt, 0.1 / fastest)

    ad, bd = discretize(a, b, dt)
    states = np.zeros((steps + 1, n))
    states[0] = np.asarray(x0, dtype=float).reshape(n)
    for k in range(steps):
        x = ad @ states[k] + bd @ inputs[k]
        if not np.all(np.isfinite(x)):
            raise IntegrationError("non-finite state", k + 1)
        states[k + 1] = x
    return LtiSegment(times, states, inputs)


def delay_steps(delay_s: float, dt: float) -> int:
    return int(math.ceil(delay_s / dt - 1e-9)) if delay_s > 0 else 0


# ============================================================================
# Scenario runs
# ============================================================================

@dataclass
class PlantState:
    """Absolute unit states and switch configuration carried between events."""

    switch_states: Dict[str, bool]
    x: Dict[str, float]
    time: float


@dataclass
class EventReport:
    event_id: str
    index: int
    time: float
    switch: str
    action: str
    strategy: str
    fallback: bool = False
    n: int = 0
    m: int = 0
    restored_buses: Tuple[str, ...] = ()
    shed_buses: Tuple[str, ...] = ()
    certificate: Optional[dict] = None
    controller: Optional[dict] = None
    verification: Optional[dict] = None
    settled: bool = True
    derivative_norm: float = 0.0
    wall_time: float = 0.0
    error: str = ""

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "event_id": self.event_id,
            "index": self.index,
            "time": self.time,
            "switch": self.switch,
            "action": self.action,
            "strategy": self.strategy,
            "fallback": self.fallback,
            "n": self.n,
            "m": self.m,
            "restored_buses": list(self.restored_buses),
            "shed_buses": list(self.shed_buses),
            "certificate": self.certificate,
            "controller": self.controller,
            "verification": self.verification,
            "settled": self.settled,
            "derivative_norm": self.derivative_norm,
            "error": self.error,
        }
        if timing:
            out["wall_time_s"] = self.wall_time
        return out


@dataclass
class Segment:
    frame: pd.DataFrame
    report: Optional[EventReport]
    state: PlantState


@dataclass
class SimulationTrace:
    frame: pd.DataFrame
    reports: List[EventReport]
    strategy: str
    delay_s: float

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=float)


class ScenarioRunner:
    """Runs one scenario for one strategy and delay."""

    def __init__(
        self,
        scenario: Scenario,
        strategy: Optional[str] = None,
        delay_s: Optional[float] = None,
        synthesis: Optional[SynthesisSettings] = None,
        simulation: Optional[SimulationSettings] = None,
        use_profiles: bool = True,
        event_overrides: bool = True,
    ):
        scenario.validate()
        self.scenario = scenario
        self.network = scenario.network
        self.strategy = strategy or scenario.strategy
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy '{self.strategy}'")
        self.delay_s = scenario.delay_s if delay_s is None else float(delay_s)
        if self.delay_s < 0:
            raise ParameterError(f"delay must be >= 0, got {self.delay_s}")
        self.synthesis = synthesis or SynthesisSettings().with_gamma(scenario.gamma)
        self.simulation = simulation or SimulationSettings(dt=scenario.dt_s, horizon=scenario.horizon_s)
        self.event_overrides = event_overrides
        self.dt = self.simulation.dt

        states0 = self.network.initial_switch_states()
        adm = build_admittance(self.network, states0, allow_dead_islands=True)
        self.offline = tuple(u.id for u in self.network.sg_units + self.network.ig_units if u.bus in adm.dead)
        if self.offline:
            logger.info("units inside de-energized islands stay offline: %s", ", ".join(self.offline))
        self.units = {m.unit_id: m for m in self.network.units() if m.unit_id not in self.offline}
        self.dg_columns = tuple(self.units)
        self.bus_columns = tuple(b for b in self.network.bus_ids if b != self.network.slack)

        self.profiles = None
        if use_profiles and scenario.profiles and scenario.profiles.channels:
            # per-run copy on the run grid
            self.profiles = replace(scenario.profiles, dt=self.dt, t_end=scenario.end_time)

        op0 = solve_steady_state(self.network, states0, None, self.offline)
        self.references = op0.references()
        x0 = {}
        for uid, point in op0.dg.items():
            for name, value in zip(self.units[uid].state_names, point.x0):
                x0[f"{uid}.{name}"] = float(value)
        self.initial = PlantState(states0, x0, 0.0)

    def configuration_before(self, index: int) -> Dict[str, bool]:
        states = dict(self.initial.switch_states)
        for event in self.scenario.events[:index]:
            states[event.switch] = event.action == "close"
        return states

    def event_builder(self, index: int) -> SwitchModelBuilder:
        """Model builder of one event, at the configuration left by the earlier events.

        Loads sit at their rated demand; scenario runs use the demand of the
        event time instead (see load_levels).
        """
        events = self.scenario.events
        if not 0 <= index < len(events):
            raise ParameterError(f"event index {index} out of range (scenario has {len(events)} events)")
        pre = self.configuration_before(index)
        post = dict(pre)
        post[events[index].switch] = events[index].action == "close"
        return SwitchModelBuilder(self.network, pre, post, self.references, self.offline)

    def load_levels(self, t: float) -> Dict[str, float]:
        """Demand of every profiled load at time t, as a multiple of its rating."""
        if self.profiles is None:
            return {}
        loads = self.profiles.loads
        values = self.profiles.sample([t], loads)[0]
        return {load: 1.0 + float(v) for load, v in zip(loads, values)}

    # ------------------------------------------------------------------
    def _system(self, model: DnStateSpace, controller: Optional[FvController]):
        n = model.n
        k = model.b_w.shape[1]
        if controller is None:
            a = model.a
            b = np.hstack([model.b_nr, np.zeros((n, 1)), model.b_w])
            return a, b
        q = controller.order
        a = np.block([[model.a, model.b_dg @ controller.c_ff], [np.zeros((q, n)), controller.a_ff]])
        b = np.block([
            [model.b_nr, np.zeros((n, 1)), model.b_w],
            [np.zeros((q, 1)), controller.b_ff, np.zeros((q, k))],
        ])
        return a, b

    def _delta(self, x_abs: Dict[str, float], model: DnStateSpace) -> np.ndarray:
        # states of units new to the model start at their own equilibrium
        return np.array([x_abs.get(label, model.x0[k]) - model.x0[k] for k, label in enumerate(model.state_labels)])

    def _segment(self, model: DnStateSpace, controller: Optional[FvController], t0: float, t1: float, dx0: np.ndarray, event_id: str):
        n = model.n
        a, b = self._system(model, controller)
        steps = int(round((t1 - t0) / self.dt))
        times = t0 + self.dt * np.arange(steps + 1)
        inputs = np.zeros((steps + 1, b.shape[1]))
        if event_id:
            inputs[:, 0] = 1.0
            if controller is not None:
                inputs[delay_steps(self.delay_s, self.dt):, 1] = 1.0
        if self.profiles is not None and model.disturbance_ids:
            # the model is linearized at the demand of t0
            origin = self.profiles.sample([t0], model.disturbance_ids)
            inputs[:, 2:] = self.profiles.sample(times, model.disturbance_ids) - origin

        z0 = np.concatenate([dx0, np.zeros(controller.order)]) if controller is not None else dx0
        seg = integrate_lti(a, b, z0, (t0, t1), self.dt, inputs)
        x = seg.states[:, :n]
        u = seg.inputs[:, 0]
        w = seg.inputs[:, 2:]

        columns = {"time_s": seg.times}
        dv = x @ model.c_dg.T
        q = x @ model.q_x.T + np.outer(u, model.q_u) + w @ model.q_w.T
        p = x @ model.p_x.T + np.outer(u, model.p_u) + w @ model.p_w.T
        uff = seg.states[:, n:] @ controller.c_ff.T if controller is not None else np.zeros((len(u), model.m))
        vbus = x @ model.vmag_x.T + np.outer(u, model.vmag_u) + w @ model.vmag_w.T + model.vmag_offset
        pos = {g: k for k, g in enumerate(model.dg_ids)}
        for prefix, values in (("dv", dv), ("q", q), ("p", p), ("uff", uff)):
            for g in self.dg_columns:
                columns[f"{prefix}_{g}"] = values[:, pos[g]] if g in pos else np.full(len(u), np.nan)
        bus_pos = {bus: k for k, bus in enumerate(model.bus_order)}
        for bus in self.bus_columns:
            columns[f"vbus_{bus}"] = vbus[:, bus_pos[bus]] if bus in bus_pos else np.full(len(u), np.nan)
        events = np.full(len(u), "", dtype=object)
        if event_id:
            events[0] = event_id
        columns["event"] = events
        frame = pd.DataFrame(columns)

        z_end = seg.states[-1]
        derivative = float(np.max(np.abs(a @ z_end + b @ seg.inputs[-1]))) if z_end.size else 0.0
        return frame, z_end, derivative

    def _carry(self, model: DnStateSpace, controller: Optional[FvController], z_end: np.ndarray) -> Dict[str, float]:
        n = model.n
        x_end = z_end[:n].copy()
        if controller is not None:
            u_ff = controller.c_ff @ z_end[n:]
            for g, uid in enumerate(model.dg_ids):
                label = f"{uid}.{self.units[uid].integrator}"
                x_end[model.state_labels.index(label)] += u_ff[g]
        return {label: float(model.x0[k] + x_end[k]) for k, label in enumerate(model.state_labels)}

    # ------------------------------------------------------------------
    def run_initial(self, t1: float) -> Segment:
        """Pre-event interval: no switching, profiles only."""
        states = self.initial.switch_states
        builder = SwitchModelBuilder(self.network, states, states, self.references, self.offline)
        model = builder.build()
        frame, z_end, derivative = self._segment(model, None, 0.0, t1, self._delta(self.initial.x, model), "")
        logger.debug("initial interval finished, derivative norm %.3e", derivative)
        return Segment(frame, None, PlantState(states, self._carry(model, None, z_end), t1))

    def run_switch_event(self, state: PlantState, index: int, event: SwitchEvent, t_end: float) -> Segment:
        started = time.perf_counter()
        event_id = Scenario.event_id(index)
        post_states = dict(state.switch_states)
        post_states[event.switch] = event.action == "close"
        try:
            builder = SwitchModelBuilder(
                self.network, state.switch_states, post_states, self.references, self.offline,
                load_levels=self.load_levels(event.time),
            )
            model = builder.build()
        except FvcToolkitError as exc:
            raise EventError(index, exc) from exc

        report = EventReport(
            event_id, index, event.time, event.switch, event.action, self.strategy,
            n=model.n, m=model.m, restored_buses=builder.restored_buses, shed_buses=builder.shed_buses,
        )
        controller = None
        if self.strategy == "proposed":
            spec = self.scenario.uncertainty
            settings = self.synthesis
            if self.event_overrides:
                spec = event.uncertainty or spec
                settings = settings.with_gamma(event.gamma)
            settings = settings.with_delay(self.delay_s)
            try:
                result = synthesize(builder, spec, settings, threads=self.simulation.threads)
                controller = result.controller
                report.certificate = result.certificate.to_dict()
                report.controller = controller.to_dict()
                report.verification = result.verification.to_dict() if result.verification else None
            except FvcToolkitError as exc:
                if self.simulation.on_failure == "abort":
                    raise EventError(index, exc) from exc
                logger.warning("%s: synthesis failed (%s), falling back to feedback-only", event_id, exc)
                report.fallback = True
                report.error = str(exc)

        frame, z_end, derivative = self._segment(model, controller, event.time, t_end, self._delta(state.x, model), event_id)
        report.derivative_norm = derivative
        report.settled = derivative < self.simulation.settle_threshold
        if not report.settled:
            logger.warning("%s: not settled at t=%.3f s (derivative norm %.3e)", event_id, t_end, derivative)
        report.wall_time = time.perf_counter() - started
        logger.info("%s (%s %s at t=%.3f s) finished in %.2f s", event_id, event.action, event.switch, event.time, report.wall_time)
        return Segment(frame, report, PlantState(post_states, self._carry(model, controller, z_end), t_end))

    def run(self) -> SimulationTrace:
        events = self.scenario.events
        segments = []
        state = self.initial
        first = events[0].time if events else self.scenario.horizon_s
        if first > 0:
            segment = self.run_initial(first)
            segments.append(segment)
            state = segment.state
        for index, event in enumerate(events):
            t_end = events[index + 1].time if index + 1 < len(events) else event.time + self.simulation.horizon
            segment = self.run_switch_event(state, index, event, t_end)
            segments.append(segment)
            state = segment.state

        # adjacent segments share their boundary sample; the later one keeps it
        frames = [s.frame.iloc[:-1] for s in segments[:-1]] + [segments[-1].frame]
        frame = pd.concat(frames, ignore_index=True)
        return SimulationTrace(frame, [s.report for s in segments if s.report is not None], self.strategy, self.delay_s)


def run_scenario(scenario: Scenario, **kwargs) -> SimulationTrace:
    """Executes every event in order; keyword arguments go to ScenarioRunner."""
    return ScenarioRunner(scenario, **kwargs).run()


# ============================================================================
# Metrics
# ============================================================================

@dataclass
class Metrics:
    dv_rms_avg: float
    dv_pk_max: float
    dt_set_max: float
    per_bus: Dict[str, dict] = field(default_factory=dict)
    per_event: Dict[str, dict] = field(default_factory=dict)
    per_dg: Dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dv_rms_avg": self.dv_rms_avg,
            "dv_pk_max": self.dv_pk_max,
            "dt_set_max": self.dt_set_max,
            "per_bus": self.per_bus,
            "per_event": self.per_event,
            "per_dg": self.per_dg,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Metrics":
        return cls(
            dv_rms_avg=float(data["dv_rms_avg"]),
            dv_pk_max=float(data["dv_pk_max"]),
            dt_set_max=float(data["dt_set_max"]),
            per_bus=data.get("per_bus", {}),
            per_event=data.get("per_event", {}),
            per_dg=data.get("per_dg", {}),
        )


def event_windows(frame: pd.DataFrame) -> List[Tuple[str, int, int]]:
    """(event id, first row, end row) per event; the whole trace when unmarked."""
    events = frame["event"].fillna("").astype(str).tolist() if "event" in frame else [""] * len(frame)
    marks = [k for k, e in enumerate(events) if e]
    if not marks:
        return [(NO_EVENT, 0, len(frame))]
    bounds = marks + [len(frame)]
    return [(events[s], s, e) for s, e in zip(bounds[:-1], bounds[1:])]


def window_stats(t: np.ndarray, v: np.ndarray, band: SettleBand) -> Optional[dict]:
    ok = np.isfinite(v)
    t, v = t[ok], v[ok]
    if v.size == 0:
        return None
    peak = float(v.max() - v.min())
    width = band.width(peak)
    outside = np.flatnonzero(np.abs(v - v[-1]) > width)
    if outside.size:
        settle = float(t[min(outside[-1] + 1, v.size - 1)] - t[0])
    else:
        settle = 0.0
    return {"rms": float(np.sqrt(np.mean(v * v))), "pk": peak, "settle": settle}


def compute_metrics(trace: Union[SimulationTrace, pd.DataFrame], band: Optional[SettleBand] = None) -> Metrics:
    band = band or SettleBand()
    frame = trace.frame if isinstance(trace, SimulationTrace) else trace
    if frame is None or len(frame) == 0:
        raise MetricsError("empty trace")
    t = frame["time_s"].to_numpy(dtype=float)
    bus_cols = [c for c in frame.columns if c.startswith("vbus_")] or [c for c in frame.columns if c.startswith("dv_")]
    if not bus_cols:
        raise MetricsError("trace has no voltage columns")
    dg_ids = [c[3:] for c in frame.columns if c.startswith("dv_")]

    per_event = {}
    union = {col: [] for col in bus_cols}
    per_dg = {g: {"q_rms_sum": 0.0, "dv_pk": 0.0} for g in dg_ids}
    for event_id, start, stop in event_windows(frame):
        tw = t[start:stop]
        if stop - start < 2 or tw[-1] - tw[0] < band.min_window:
            raise MetricsError(f"window '{event_id}' is shorter than the settle window")
        buses = {}
        for col in bus_cols:
            values = frame[col].to_numpy(dtype=float)[start:stop]
            stats = window_stats(tw, values, band)
            if stats is None:
                continue
            buses[col.split("_", 1)[1]] = stats
            union[col].append(values[np.isfinite(values)])
        for g in dg_ids:
            if f"q_{g}" in frame:
                q = window_stats(tw, frame[f"q_{g}"].to_numpy(dtype=float)[start:stop], band)
                if q is not None:
                    per_dg[g]["q_rms_sum"] += q["rms"]
            dv = window_stats(tw, frame[f"dv_{g}"].to_numpy(dtype=float)[start:stop], band)
            if dv is not None:
                per_dg[g]["dv_pk"] = max(per_dg[g]["dv_pk"], dv["pk"])
        if not buses:
            raise MetricsError(f"window '{event_id}' has no energized bus")
        per_event[event_id] = {
            "t_event": float(tw[0]),
            "dv_rms_avg": float(np.mean([s["rms"] for s in buses.values()])),
            "dv_pk_max": max(s["pk"] for s in buses.values()),
            "dt_set_max": max(s["settle"] for s in buses.values()),
            "buses": buses,
        }

    per_bus = {}
    for col, chunks in union.items():
        if not chunks:
            continue
        values = np.concatenate(chunks)
        bus = col.split("_", 1)[1]
        stats = [ev["buses"][bus] for ev in per_event.values() if bus in ev["buses"]]
        per_bus[bus] = {
            "rms": float(np.sqrt(np.mean(values * values))),
            "pk": max(s["pk"] for s in stats),
            "settle": max(s["settle"] for s in stats),
        }

    return Metrics(
        dv_rms_avg=float(np.mean([b["rms"] for b in per_bus.values()])),
        dv_pk_max=max(b["pk"] for b in per_bus.values()),
        dt_set_max=max(b["settle"] for b in per_bus.values()),
        per_bus=per_bus,
        per_event=per_event,
        per_dg=per_dg,
    )
