"""Switchable small-signal model of a reconfigurable distribution network.

The network is algebraic and written in a common synchronous dq frame. Bus k
owns rows 2k (real part) and 2k+1 (imaginary part) of every dq vector. The
slack bus is an infinite bus at 1∠0 and is eliminated from the linear model.

Model of a switch event (pre-event admittance Y_B, post-event Y_A):

    dx/dt = A_DN x + B_DG u_ff + B_NR u
    V_DG  = C_DG x

with Z = (Y_A + D_V - D_L)^-1, A_DN = A_X + B_V Z C_X, B_NR = -B_V Z dI_T and
dI_T = (Y_A - Y_B) V0 on buses energized before the event. Buses energized by
the event carry the affine offset of their restored loads, linearized at the
post-event power flow.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import scipy.linalg

from components import (
    IgParams,
    InverterUnit,
    SgParams,
    SynchronousMachine,
    UnitLinearization,
    ZipLoad,
    linearize_unit,
    zip_injection,
)
from errors import ConfigurationError, ModelError, ParameterError, PowerFlowError, SingularLoadError
from utils import complex_step_jacobian, dq_expand, is_hurwitz

logger = logging.getLogger(__name__)

SWITCH_KINDS = ("TSW", "SSW")
LOAD_VOLTAGE_FLOOR = 1e-3


# ============================================================================
# Network description
# ============================================================================

@dataclass(frozen=True)
class Bus:
    id: str
    kv: float


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    b: float = 0.0      # total shunt susceptance, split between both ends

    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Switch:
    id: str
    kind: str
    from_bus: str
    to_bus: str
    closed: bool
    r: float = 0.0
    x: float = 0.01

    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class SgUnit:
    id: str
    bus: str
    params: SgParams
    p_mw: float
    v_set: float = 1.0


@dataclass(frozen=True)
class IgUnit:
    id: str
    bus: str
    params: IgParams
    p_mw: float
    v_set: float = 1.0


@dataclass(frozen=True)
class NetworkDescription:
    buses: Tuple[Bus, ...]
    lines: Tuple[Line, ...]
    switches: Tuple[Switch, ...]
    sg_units: Tuple[SgUnit, ...]
    ig_units: Tuple[IgUnit, ...]
    loads: Tuple[ZipLoad, ...]
    slack: str
    base_mva: float = 1.0
    freq_hz: float = 60.0

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate bus ids", buses=sorted({i for i in ids if ids.count(i) > 1}))
        known = set(ids)
        if self.slack not in known:
            raise ConfigurationError(f"slack bus '{self.slack}' does not exist")
        if self.base_mva <= 0 or self.freq_hz <= 0:
            raise ParameterError("base_mva and freq_hz must be > 0")
        for branch in self.lines + self.switches:
            missing = [b for b in (branch.from_bus, branch.to_bus) if b not in known]
            if missing:
                raise ConfigurationError(f"branch '{branch.id}' references unknown buses", buses=missing)
            if branch.from_bus == branch.to_bus:
                raise ConfigurationError(f"branch '{branch.id}' connects a bus to itself", buses=[branch.from_bus])
            if branch.r == 0 and branch.x == 0:
                raise ParameterError(f"branch '{branch.id}' has zero series impedance")
        for sw in self.switches:
            if sw.kind not in SWITCH_KINDS:
                raise ParameterError(f"switch '{sw.id}' has unknown kind '{sw.kind}'")
        for unit in self.sg_units + self.ig_units:
            if unit.bus not in known:
                raise ConfigurationError(f"unit '{unit.id}' sits on an unknown bus", buses=[unit.bus])
            if unit.bus == self.slack:
                raise ConfigurationError(f"unit '{unit.id}' sits on the slack bus", buses=[unit.bus])
        for load in self.loads:
            if load.bus not in known:
                raise ConfigurationError(f"load '{load.id}' sits on an unknown bus", buses=[load.bus])
        for group in (self.lines + self.switches, self.sg_units + self.ig_units, self.loads):
            names = [item.id for item in group]
            if len(set(names)) != len(names):
                raise ConfigurationError(f"duplicate ids: {sorted({n for n in names if names.count(n) > 1})}")

    @property
    def bus_ids(self) -> Tuple[str, ...]:
        return tuple(b.id for b in self.buses)

    @property
    def bus_index(self) -> Dict[str, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    def kv(self, bus: str) -> float:
        return next(b.kv for b in self.buses if b.id == bus)

    def switch(self, switch_id: str) -> Switch:
        for sw in self.switches:
            if sw.id == switch_id:
                return sw
        raise ConfigurationError(f"unknown switch '{switch_id}'")

    def initial_switch_states(self) -> Dict[str, bool]:
        return {sw.id: sw.closed for sw in self.switches}

    def units(self) -> list:
        """Dynamic models, SGs first, then IGs."""
        models = [SynchronousMachine(u.id, u.bus, u.params, self.base_mva, self.freq_hz) for u in self.sg_units]
        models += [InverterUnit(u.id, u.bus, u.params, self.base_mva, self.freq_hz, self.kv(u.bus)) for u in self.ig_units]
        return models

    def dispatch(self, unit_id: str) -> Tuple[float, float]:
        for unit in self.sg_units + self.ig_units:
            if unit.id == unit_id:
                return unit.p_mw / self.base_mva, unit.v_set
        raise ConfigurationError(f"unknown unit '{unit_id}'")

    def scaled(self, ka: float = 1.0, lf: float = 1.0, loads: Sequence[str] = (), sr: float = 1.0) -> "NetworkDescription":
        """Copy with K_A, L_f and the rating of the named loads multiplied."""
        if ka == 1.0 and lf == 1.0 and (sr == 1.0 or not loads):
            return self
        sg = tuple(dataclasses.replace(u, params=dataclasses.replace(u.params, k_a=u.params.k_a * ka)) for u in self.sg_units)
        ig = tuple(dataclasses.replace(u, params=dataclasses.replace(u.params, l_f=u.params.l_f * lf)) for u in self.ig_units)
        selected = set(loads)
        scaled_loads = tuple(ld.scaled(sr) if ld.id in selected else ld for ld in self.loads)
        return dataclasses.replace(self, sg_units=sg, ig_units=ig, loads=scaled_loads)

    def with_load_levels(self, levels: Optional[Mapping[str, float]]) -> "NetworkDescription":
        """Copy with each named load at ``levels[id]`` times its rating (the current demand)."""
        levels = levels or {}
        unknown = sorted(set(levels) - {ld.id for ld in self.loads})
        if unknown:
            raise ConfigurationError(f"load levels reference unknown loads: {', '.join(unknown)}")
        if all(levels.get(ld.id, 1.0) == 1.0 for ld in self.loads):
            return self
        return dataclasses.replace(self, loads=tuple(ld.scaled(levels.get(ld.id, 1.0)) for ld in self.loads))


# ============================================================================
# Admittance
# ============================================================================

@dataclass(frozen=True)
class Admittance:
    """Nodal admittance of one switch configuration."""

    y: np.ndarray               # complex N x N
    ydq: np.ndarray             # real 2N x 2N
    buses: Tuple[str, ...]
    energized: Tuple[str, ...]  # buses connected to the slack, in bus order
    dead: Tuple[str, ...]


@dataclass(frozen=True)
class AdmittancePair:
    before: Admittance          # Y_B
    after: Admittance           # Y_A

    @property
    def delta(self) -> np.ndarray:
        return self.after.y - self.before.y

    @property
    def delta_dq(self) -> np.ndarray:
        return self.after.ydq - self.before.ydq


def _check_switch_states(network: NetworkDescription, switch_states: Mapping[str, bool]):
    known = {sw.id for sw in network.switches}
    missing = sorted(known - set(switch_states))
    unknown = sorted(set(switch_states) - known)
    if missing or unknown:
        raise ConfigurationError(f"switch states do not match the network (missing: {missing}, unknown: {unknown})")


def build_admittance(network: NetworkDescription, switch_states: Mapping[str, bool], allow_dead_islands: bool = False) -> Admittance:
    """Nodal admittance with open switches contributing nothing.

    Islands without the slack bus raise ConfigurationError unless
    ``allow_dead_islands`` is set, in which case their buses are reported as
    dead.
    """
    _check_switch_states(network, switch_states)
    index = network.bus_index
    y = np.zeros((len(index), len(index)), dtype=complex)
    graph = nx.Graph()
    graph.add_nodes_from(network.bus_ids)

    def stamp(i, j, ys, shunt=0.0):
        y[i, i] += ys + 0.5j * shunt
        y[j, j] += ys + 0.5j * shunt
        y[i, j] -= ys
        y[j, i] -= ys

    for line in network.lines:
        stamp(index[line.from_bus], index[line.to_bus], line.series_admittance(), line.b)
        graph.add_edge(line.from_bus, line.to_bus)
    for sw in network.switches:
        if switch_states[sw.id]:
            stamp(index[sw.from_bus], index[sw.to_bus], sw.series_admittance())
            graph.add_edge(sw.from_bus, sw.to_bus)

    live = nx.node_connected_component(graph, network.slack)
    energized = tuple(b for b in network.bus_ids if b in live)
    dead = tuple(b for b in network.bus_ids if b not in live)
    if dead and not allow_dead_islands:
        raise ConfigurationError("island without the slack bus", buses=dead)

    return Admittance(y=y, ydq=dq_expand(y), buses=network.bus_ids, energized=energized, dead=dead)


# ============================================================================
# Steady state
# ============================================================================

@dataclass(frozen=True)
class DgOperatingPoint:
    unit_id: str
    bus: str
    v: complex
    s: complex                  # injected power, system pu
    x0: np.ndarray
    ref: tuple

    @property
    def current(self) -> complex:
        return np.conj(self.s / self.v)


@dataclass(frozen=True)
class OperatingPoint:
    buses: Tuple[str, ...]
    slack: str
    v: np.ndarray               # complex bus voltages, dead buses at 0
    i: np.ndarray               # complex injections, equal to Y v
    energized: Tuple[str, ...]
    dead: Tuple[str, ...]
    dg: Dict[str, DgOperatingPoint]
    residual: float
    iterations: int

    @property
    def v_dq(self) -> np.ndarray:
        out = np.zeros(2 * len(self.v))
        out[0::2] = self.v.real
        out[1::2] = self.v.imag
        return out

    def voltage(self, bus: str) -> complex:
        return complex(self.v[self.buses.index(bus)])

    def references(self) -> Dict[str, tuple]:
        return {uid: dg.ref for uid, dg in self.dg.items()}


def solve_steady_state(
    network: NetworkDescription,
    switch_states: Mapping[str, bool],
    dg_setpoints: Optional[Mapping[str, tuple]] = None,
    offline: Sequence[str] = (),
    tol: float = 1e-8,
    max_iter: int = 50,
) -> OperatingPoint:
    """Newton power flow on the nodal current mismatch.

    Units without a setpoint follow their dispatch (P, V_set). With a held
    reference an SG stays a (P, V) unit, while an IG keeps its in-phase current
    and terminal voltage, which is the equilibrium of its control loops.
    Dead islands are skipped; a unit inside one must be listed as offline.
    """
    dg_setpoints = dg_setpoints or {}
    adm = build_admittance(network, switch_states, allow_dead_islands=True)
    index = network.bus_index
    live = [b for b in adm.energized if b != network.slack]
    pos = {b: j for j, b in enumerate(live)}
    s_base = network.base_mva

    units = []
    for model in network.units():
        if model.unit_id in offline:
            continue
        if model.bus not in pos:
            raise ConfigurationError(f"unit '{model.unit_id}' is inside a de-energized island", buses=[model.bus])
        units.append(model)

    # per unit: (model, mode, fixed quantity, voltage set point)
    plan = []
    for model in units:
        ref = dg_setpoints.get(model.unit_id)
        if ref is None:
            p, v_set = network.dispatch(model.unit_id)
            plan.append((model, "pv", p, v_set))
        elif model.kind == "sg":
            plan.append((model, "pv", ref.tm * model.scale, ref.vref))
        else:
            plan.append((model, "current", ref.i_re * model.scale, ref.vref))

    loads = [ld for ld in network.loads if ld.bus in pos]
    n_bus = len(live)
    n_var = 2 * n_bus + len(plan)
    slack_row = 2 * index[network.slack]
    live_rows = np.array([r for b in live for r in (2 * index[b], 2 * index[b] + 1)], dtype=int)

    def expand(x):
        vdq = np.zeros(2 * len(index), dtype=x.dtype)
        vdq[slack_row] = 1.0
        for b, j in pos.items():
            vdq[2 * index[b]] = x[2 * j]
            vdq[2 * index[b] + 1] = x[2 * j + 1]
        return vdq

    def injections(x, vdq):
        inj = np.zeros(2 * len(index), dtype=x.dtype)
        for ld in loads:
            k = index[ld.bus]
            inj[2 * k:2 * k + 2] += zip_injection(ld, vdq[2 * k:2 * k + 2], s_base)
        extra = []
        for g, (model, mode, fixed, v_set) in enumerate(plan):
            k = index[model.bus]
            a, b = vdq[2 * k], vdq[2 * k + 1]
            y = x[2 * n_bus + g]
            if mode == "pv":
                m2 = a * a + b * b
                cur = np.array([(fixed * a + y * b) / m2, (fixed * b - y * a) / m2])
            else:
                cur = np.array([fixed + 0.0 * y, y])
            inj[2 * k:2 * k + 2] += cur
            extra.append(a * a + b * b - v_set * v_set)
        return inj, extra

    def mismatch(x):
        vdq = expand(x)
        inj, extra = injections(x, vdq)
        res = (inj - adm.ydq @ vdq)[live_rows]
        return np.concatenate([res, np.array(extra, dtype=x.dtype)])

    x = np.zeros(n_var)
    x[0:2 * n_bus:2] = 1.0
    residual = np.inf
    iterations = 0
    converged = False
    if n_var:
        for iterations in range(1, max_iter + 1):
            f = mismatch(x)
            residual = float(np.max(np.abs(f)))
            logger.debug("power flow iteration %d: residual %.3e", iterations, residual)
            if residual < tol:
                converged = True
                break
            try:
                x = x + np.linalg.solve(complex_step_jacobian(mismatch, x), -f)
            except np.linalg.LinAlgError:
                raise PowerFlowError("singular power flow Jacobian", residual, iterations)
        if not converged:
            raise PowerFlowError("power flow did not converge", residual, iterations)
        # polish
        x = x + np.linalg.solve(complex_step_jacobian(mismatch, x), -mismatch(x))
        residual = float(np.max(np.abs(mismatch(x))))
    else:
        residual = 0.0

    vdq = expand(x)
    v = vdq[0::2] + 1j * vdq[1::2]
    i_full = adm.ydq @ vdq
    i = i_full[0::2] + 1j * i_full[1::2]

    dg = {}
    for g, (model, mode, fixed, v_set) in enumerate(plan):
        k = index[model.bus]
        vk = v[k]
        if mode == "pv":
            s = complex(fixed, x[2 * n_bus + g])
        else:
            s = vk * np.conj(complex(fixed, x[2 * n_bus + g]))
        held = dg_setpoints.get(model.unit_id)
        if model.kind == "sg":
            x0, ref = model.initialize(vk, s)
            if held is not None:
                ref = held
        else:
            x0, ref = model.initialize(vk, s, held)
        dg[model.unit_id] = DgOperatingPoint(model.unit_id, model.bus, complex(vk), s, x0, ref)

    logger.debug("power flow converged in %d iterations, residual %.3e", iterations, residual)
    return OperatingPoint(
        buses=network.bus_ids,
        slack=network.slack,
        v=v,
        i=i,
        energized=adm.energized,
        dead=adm.dead,
        dg=dg,
        residual=residual,
        iterations=iterations,
    )


# ============================================================================
# Linearization
# ============================================================================

@dataclass(frozen=True)
class DgLinearization:
    units: Tuple[UnitLinearization, ...]
    bus_order: Tuple[str, ...]
    a_x: np.ndarray
    b_v: np.ndarray
    c_x: np.ndarray
    d_v: np.ndarray
    b_dg: np.ndarray
    offsets: Tuple[int, ...]

    @property
    def state_labels(self) -> Tuple[str, ...]:
        return tuple(label for unit in self.units for label in unit.labels)

    @property
    def output_labels(self) -> Tuple[str, ...]:
        return tuple(f"V_{unit.unit_id}" for unit in self.units)

    def selector(self) -> np.ndarray:
        c = np.zeros((len(self.units), self.a_x.shape[0]))
        for r, (unit, off) in enumerate(zip(self.units, self.offsets)):
            c[r, off + unit.vm_index] = 1.0
        return c


def linearize_dgs(sg_units, ig_units, op: OperatingPoint, bus_order: Optional[Sequence[str]] = None) -> DgLinearization:
    """Per-unit Jacobians at the operating point, assembled block-diagonally (SGs first)."""
    if bus_order is None:
        bus_order = [b for b in op.energized if b != op.slack]
    bus_order = tuple(bus_order)
    pos = {b: j for j, b in enumerate(bus_order)}
    blocks = []
    for model in list(sg_units) + list(ig_units):
        if model.unit_id not in op.dg:
            continue
        if model.bus not in pos:
            raise ConfigurationError(f"unit '{model.unit_id}' is inside a de-energized island", buses=[model.bus])
        point = op.dg[model.unit_id]
        v0 = np.array([point.v.real, point.v.imag])
        blocks.append(linearize_unit(model, point.x0, v0, point.ref))

    sizes = [unit.a.shape[0] for unit in blocks]
    offsets = tuple(int(v) for v in np.concatenate([[0], np.cumsum(sizes)[:-1]])) if blocks else ()
    n = int(sum(sizes))
    nb = 2 * len(bus_order)
    a_x = scipy.linalg.block_diag(*[unit.a for unit in blocks]) if blocks else np.zeros((0, 0))
    b_v = np.zeros((n, nb))
    c_x = np.zeros((nb, n))
    d_v = np.zeros((nb, nb))
    b_dg = np.zeros((n, len(blocks)))
    for col, (unit, off) in enumerate(zip(blocks, offsets)):
        rows = slice(off, off + unit.a.shape[0])
        k = pos[unit.bus]
        b_v[rows, 2 * k:2 * k + 2] = unit.b_v
        c_x[2 * k:2 * k + 2, rows] = unit.c_x
        d_v[2 * k:2 * k + 2, 2 * k:2 * k + 2] += unit.d_v
        b_dg[rows, col] = unit.b_u
    return DgLinearization(tuple(blocks), bus_order, a_x, b_v, c_x, d_v, b_dg, offsets)


def zip_load_jacobian(loads: Sequence[ZipLoad], v0: Mapping[str, complex], bus_order: Sequence[str], s_base: float) -> np.ndarray:
    """Block-diagonal Jacobian dI_L/dV of the ZIP injection currents.

    Loads on buses outside ``bus_order`` (slack, dead islands) are ignored.
    """
    pos = {b: j for j, b in enumerate(bus_order)}
    d_l = np.zeros((2 * len(pos), 2 * len(pos)))
    for load in loads:
        if load.bus not in pos:
            continue
        v = complex(v0[load.bus])
        if abs(v) < LOAD_VOLTAGE_FLOOR:
            raise SingularLoadError(f"load '{load.id}' at |V| = {abs(v):.2e} pu below {LOAD_VOLTAGE_FLOOR} pu")
        k = pos[load.bus]
        d_l[2 * k:2 * k + 2, 2 * k:2 * k + 2] += complex_step_jacobian(
            lambda z, ld=load: zip_injection(ld, z, s_base), [v.real, v.imag]
        )
    return d_l


# ============================================================================
# Assembly
# ============================================================================

@dataclass
class DnStateSpace:
    """Switched plant (A_DN, B_DG, B_NR, C_DG) plus the network output maps.

    Output maps give, for the deviation state x, switching input u and load
    disturbance w: bus voltages dV (dq), bus magnitude deviations and per-DG
    active/reactive power deviations (system pu).
    """

    a: np.ndarray
    b_dg: np.ndarray
    b_nr: np.ndarray
    c_dg: np.ndarray
    state_labels: Tuple[str, ...] = ()
    output_labels: Tuple[str, ...] = ()
    dg_ids: Tuple[str, ...] = ()
    bus_order: Tuple[str, ...] = ()
    x0: Optional[np.ndarray] = None
    references: Dict[str, tuple] = field(default_factory=dict)
    disturbance_ids: Tuple[str, ...] = ()
    b_w: Optional[np.ndarray] = None
    v_x: Optional[np.ndarray] = None
    v_u: Optional[np.ndarray] = None
    v_w: Optional[np.ndarray] = None
    vmag_x: Optional[np.ndarray] = None
    vmag_u: Optional[np.ndarray] = None
    vmag_w: Optional[np.ndarray] = None
    vmag_offset: Optional[np.ndarray] = None
    p_x: Optional[np.ndarray] = None
    p_u: Optional[np.ndarray] = None
    p_w: Optional[np.ndarray] = None
    q_x: Optional[np.ndarray] = None
    q_u: Optional[np.ndarray] = None
    q_w: Optional[np.ndarray] = None

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        n = self.a.shape[0]
        self.b_dg = np.asarray(self.b_dg, dtype=float).reshape(n, -1)
        self.b_nr = np.asarray(self.b_nr, dtype=float).reshape(n, 1)
        self.c_dg = np.asarray(self.c_dg, dtype=float).reshape(-1, n)
        if self.b_dg.shape[1] != self.c_dg.shape[0]:
            raise ModelError(f"B_DG has {self.b_dg.shape[1]} channels but C_DG has {self.c_dg.shape[0]} outputs")
        if not self.state_labels:
            self.state_labels = tuple(f"x{k}" for k in range(n))
        if not self.output_labels:
            self.output_labels = tuple(f"V_{k}" for k in range(self.m))
        if not self.dg_ids:
            self.dg_ids = tuple(label[2:] if label.startswith("V_") else label for label in self.output_labels)
        if self.x0 is None:
            self.x0 = np.zeros(n)
        if self.b_w is None:
            self.b_w = np.zeros((n, 0))

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.c_dg.shape[0]


def assemble_dn_model(
    lin: DgLinearization,
    d_l: np.ndarray,
    pair: AdmittancePair,
    op: OperatingPoint,
    load_offset: Optional[np.ndarray] = None,
    disturbance: Optional[np.ndarray] = None,
    disturbance_ids: Sequence[str] = (),
    v_reference: Optional[Mapping[str, complex]] = None,
    check_stability: bool = True,
) -> DnStateSpace:
    """Close the DG blocks through the post-event network.

    ``load_offset`` is the affine current of loads energized by the event
    (rows of ``lin.bus_order``); ``disturbance`` holds one column per load
    profile channel; ``v_reference`` gives the point about which bus voltage
    magnitude deviations are reported (default: the pre-event voltages).
    """
    index = {b: k for k, b in enumerate(op.buses)}
    rows = np.array([r for b in lin.bus_order for r in (2 * index[b], 2 * index[b] + 1)], dtype=int)
    nb = len(rows)
    n = lin.a_x.shape[0]
    closure = pair.after.ydq[np.ix_(rows, rows)] + lin.d_v - d_l
    try:
        cond = float(np.linalg.cond(closure)) if nb else 1.0
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e13:
        raise ModelError("network closure matrix (Y_A + D_V - D_L) is singular", condition=cond)

    delta_i = (pair.delta_dq @ op.v_dq)[rows]
    if load_offset is not None:
        delta_i = delta_i - load_offset
    if disturbance is None:
        disturbance = np.zeros((nb, 0))

    v_x = np.linalg.solve(closure, lin.c_x) if nb else np.zeros((0, n))
    v_u = -np.linalg.solve(closure, delta_i) if nb else np.zeros(0)
    v_w = np.linalg.solve(closure, disturbance) if nb and disturbance.shape[1] else np.zeros((nb, disturbance.shape[1]))

    a_dn = lin.a_x + lin.b_v @ v_x
    b_nr = lin.b_v @ v_u
    b_w = lin.b_v @ v_w

    if check_stability and n and not is_hurwitz(a_dn):
        worst = float(np.max(np.linalg.eigvals(a_dn).real))
        raise ModelError(f"A_DN is not Hurwitz (max real part {worst:.3e})")

    # bus magnitude deviations about the reference point of each bus
    v_reference = v_reference or {}
    v0 = op.v_dq[rows]
    nbus = len(lin.bus_order)
    vmag_x = np.zeros((nbus, n))
    vmag_u = np.zeros(nbus)
    vmag_w = np.zeros((nbus, disturbance.shape[1]))
    vmag_offset = np.zeros(nbus)
    for k, bus in enumerate(lin.bus_order):
        r = complex(v_reference.get(bus, op.voltage(bus)))
        ref = np.array([r.real, r.imag]) / abs(r)
        sl = slice(2 * k, 2 * k + 2)
        vmag_x[k] = ref @ v_x[sl]
        vmag_u[k] = ref @ v_u[sl]
        vmag_w[k] = ref @ v_w[sl]
        vmag_offset[k] = ref @ (v0[sl] - np.array([r.real, r.imag]))

    # per-DG powers: dS from dV at the terminal and the unit's current deviation
    m = len(lin.units)
    p_x, q_x = np.zeros((m, n)), np.zeros((m, n))
    p_u, q_u = np.zeros(m), np.zeros(m)
    p_w, q_w = np.zeros((m, disturbance.shape[1])), np.zeros((m, disturbance.shape[1]))
    pos = {b: k for k, b in enumerate(lin.bus_order)}
    for g, (unit, off) in enumerate(zip(lin.units, lin.offsets)):
        point = op.dg[unit.unit_id]
        a0, b0 = point.v.real, point.v.imag
        cur = point.current
        gp, gq = np.array([cur.real, cur.imag]), np.array([-cur.imag, cur.real])
        hp, hq = np.array([a0, b0]), np.array([b0, -a0])
        sl = slice(2 * pos[unit.bus], 2 * pos[unit.bus] + 2)
        cx = np.zeros((2, n))
        cx[:, off:off + unit.a.shape[0]] = unit.c_x
        di_x = cx - unit.d_v @ v_x[sl]
        di_u = -unit.d_v @ v_u[sl]
        di_w = -unit.d_v @ v_w[sl]
        p_x[g] = gp @ v_x[sl] + hp @ di_x
        q_x[g] = gq @ v_x[sl] + hq @ di_x
        p_u[g] = gp @ v_u[sl] + hp @ di_u
        q_u[g] = gq @ v_u[sl] + hq @ di_u
        p_w[g] = gp @ v_w[sl] + hp @ di_w
        q_w[g] = gq @ v_w[sl] + hq @ di_w

    x0 = np.concatenate([op.dg[u.unit_id].x0 for u in lin.units]) if lin.units else np.zeros(0)
    logger.debug("assembled model: n=%d, m=%d, buses=%d, cond=%.3e", n, m, nbus, cond)
    return DnStateSpace(
        a=a_dn,
        b_dg=lin.b_dg,
        b_nr=b_nr.reshape(n, 1),
        c_dg=lin.selector(),
        state_labels=lin.state_labels,
        output_labels=lin.output_labels,
        dg_ids=tuple(u.unit_id for u in lin.units),
        bus_order=lin.bus_order,
        x0=x0,
        references={u.unit_id: op.dg[u.unit_id].ref for u in lin.units},
        disturbance_ids=tuple(disturbance_ids),
        b_w=b_w,
        v_x=v_x,
        v_u=v_u,
        v_w=v_w,
        vmag_x=vmag_x,
        vmag_u=vmag_u,
        vmag_w=vmag_w,
        vmag_offset=vmag_offset,
        p_x=p_x,
        p_u=p_u,
        p_w=p_w,
        q_x=q_x,
        q_u=q_u,
        q_w=q_w,
    )


# ============================================================================
# Switch events
# ============================================================================

class SwitchModelBuilder:
    """Builds the model of one switch event, optionally with scaled parameters.

    ``setpoints`` are the held unit references (None at the initial dispatch);
    ``offline`` lists units kept out of service. Loads on buses whose
    energization changes with the event form the restored/shed set S_r.

    ``load_levels`` is the demand at the event time as a multiple of each
    load's rating. With the held references, the pre-event equilibrium at that
    demand is the settled state the event starts from, and the model is
    linearized there. Profile disturbance columns stay in rating units.
    """

    def __init__(
        self,
        network: NetworkDescription,
        pre_states: Mapping[str, bool],
        post_states: Mapping[str, bool],
        setpoints: Optional[Mapping[str, tuple]] = None,
        offline: Sequence[str] = (),
        check_stability: bool = True,
        load_levels: Optional[Mapping[str, float]] = None,
    ):
        self.network = network
        self.load_levels = dict(load_levels or {})
        self.pre_states = dict(pre_states)
        self.post_states = dict(post_states)
        self.setpoints = dict(setpoints or {})
        self.offline = tuple(offline)
        self.check_stability = check_stability
        before = build_admittance(network, self.pre_states, allow_dead_islands=True)
        after = build_admittance(network, self.post_states, allow_dead_islands=True)
        changed = (set(before.dead) ^ set(after.dead))
        self.restored_buses = tuple(b for b in network.bus_ids if b in set(before.dead) - set(after.dead))
        self.shed_buses = tuple(b for b in network.bus_ids if b in set(after.dead) - set(before.dead))
        self.affected_loads = tuple(ld.id for ld in network.loads if ld.bus in changed)

    def build(self, ka: float = 1.0, lf: float = 1.0, sr: float = 1.0) -> DnStateSpace:
        rated = self.network.scaled(ka=ka, lf=lf, loads=self.affected_loads, sr=sr)
        net = rated.with_load_levels(self.load_levels)
        before = build_admittance(net, self.pre_states, allow_dead_islands=True)
        after = build_admittance(net, self.post_states, allow_dead_islands=True)
        op = solve_steady_state(net, self.pre_states, self.setpoints, self.offline)
        bus_order = tuple(b for b in after.energized if b != net.slack)
        stranded = [op.dg[uid].bus for uid in op.dg if op.dg[uid].bus not in bus_order]
        if stranded:
            raise ConfigurationError("generating unit inside an island de-energized by the event", buses=stranded)

        v_reference = {b: op.voltage(b) for b in bus_order}
        pos = {b: k for k, b in enumerate(bus_order)}
        load_offset = np.zeros(2 * len(bus_order))
        if self.restored_buses:
            post = solve_steady_state(net, self.post_states, op.references(), self.offline)
            for bus in self.restored_buses:
                v_reference[bus] = post.voltage(bus)
            for load in net.loads:
                if load.bus in self.restored_buses:
                    v = v_reference[load.bus]
                    vr = np.array([v.real, v.imag])
                    jac = complex_step_jacobian(lambda z, ld=load: zip_injection(ld, z, net.base_mva), vr)
                    k = pos[load.bus]
                    load_offset[2 * k:2 * k + 2] += zip_injection(load, vr, net.base_mva) - jac @ vr

        models = [u for u in net.units() if u.unit_id in op.dg]
        lin = linearize_dgs([u for u in models if u.kind == "sg"], [u for u in models if u.kind == "ig"], op, bus_order)
        d_l = zip_load_jacobian(net.loads, v_reference, bus_order, net.base_mva)

        profile_loads = [ld for ld in rated.loads if ld.bus in pos]
        disturbance = np.zeros((2 * len(bus_order), len(profile_loads)))
        for col, load in enumerate(profile_loads):
            v = v_reference[load.bus]
            k = pos[load.bus]
            disturbance[2 * k:2 * k + 2, col] = zip_injection(load, np.array([v.real, v.imag]), net.base_mva)

        model = assemble_dn_model(
            lin,
            d_l,
            AdmittancePair(before, after),
            op,
            load_offset=load_offset,
            disturbance=disturbance,
            disturbance_ids=[ld.id for ld in profile_loads],
            v_reference=v_reference,
            check_stability=self.check_stability,
        )
        logger.info("model assembled: n=%d states, m=%d channels, %d buses", model.n, model.m, len(bus_order))
        return model
