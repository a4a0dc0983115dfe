"""Nonlinear component models of the distribution network.

Every model is written in real arithmetic on (re, im) pairs of the common
synchronous frame: no abs, conj or angle is applied to anything that can carry
a complex-step perturbation. Linearizations are taken with
``utils.complex_step_jacobian``.

Per-unit conventions
  - network quantities are on the system base ``s_base`` (MVA)
  - machine states are on the unit's own rating ``s_n``; injections are
    rescaled by s_n / s_base
  - currents are injections (positive into the network)
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np

from errors import ParameterError
from utils import complex_step_jacobian

logger = logging.getLogger(__name__)


# ============================================================================
# Parameter records
# ============================================================================

@dataclass(frozen=True)
class SgParams:
    """Synchronous generator with subtransient machine, PI voltage regulator and exciter."""

    s_n: float          # MVA
    v_n: float          # kV
    m: float            # s (2H)
    d: float
    xd: float
    xd_p: float
    xd_pp: float
    xq: float
    xq_p: float
    xq_pp: float
    td0_p: float
    td0_pp: float
    tq0_p: float
    tq0_pp: float
    t_a: float
    t_b: float
    t_c: float
    t_r: float
    k_a: float
    p_v: float
    i_v: float

    def validate(self):
        times = {
            "td0_p": self.td0_p, "td0_pp": self.td0_pp, "tq0_p": self.tq0_p, "tq0_pp": self.tq0_pp,
            "t_a": self.t_a, "t_b": self.t_b, "t_c": self.t_c, "t_r": self.t_r,
        }
        bad = [name for name, value in times.items() if not value > 0]
        if bad:
            raise ParameterError(f"SG time constants must be > 0: {', '.join(bad)}")
        if not self.xd >= self.xd_p >= self.xd_pp > 0:
            raise ParameterError(f"SG d-axis reactances must satisfy xd >= xd' >= xd'' > 0, got {self.xd}, {self.xd_p}, {self.xd_pp}")
        if not self.xq >= self.xq_p >= self.xq_pp > 0:
            raise ParameterError(f"SG q-axis reactances must satisfy xq >= xq' >= xq'' > 0, got {self.xq}, {self.xq_p}, {self.xq_pp}")
        if not self.m > 0:
            raise ParameterError(f"SG inertia M must be > 0, got {self.m}")
        if not self.k_a > 0:
            raise ParameterError(f"SG amplifier gain K_A must be > 0, got {self.k_a}")
        if self.s_n <= 0 or self.d < 0 or self.p_v < 0 or self.i_v < 0:
            raise ParameterError("SG rating must be > 0 and damping/regulator gains >= 0")


@dataclass(frozen=True)
class IgParams:
    """Averaged inverter with RL filter, dq current loops and an outer voltage loop.

    L_f, R_f and the current-loop gains are in SI units (H, ohm, ohm, ohm/s);
    voltage-loop gains are per unit.
    """

    s_n: float          # MVA
    v_dc: float         # V
    l_f: float
    r_f: float
    t_r: float
    p_v: float
    i_v: float
    p_i: float
    i_i: float
    decoupling: bool = True

    def validate(self):
        if not self.l_f > 0 or not self.r_f > 0:
            raise ParameterError(f"IG filter must have L_f > 0 and R_f > 0, got {self.l_f}, {self.r_f}")
        if not self.t_r > 0:
            raise ParameterError(f"IG transducer T_R must be > 0, got {self.t_r}")
        gains = {"p_v": self.p_v, "i_v": self.i_v, "p_i": self.p_i, "i_i": self.i_i}
        bad = [name for name, value in gains.items() if value < 0]
        if bad:
            raise ParameterError(f"IG gains must be >= 0: {', '.join(bad)}")
        if self.s_n <= 0 or self.v_dc <= 0:
            raise ParameterError("IG rating and DC voltage must be > 0")


@dataclass(frozen=True)
class ZipLoad:
    """ZIP load; weights are kept as given and normalized on use."""

    id: str
    bus: str
    p_mw: float
    q_mvar: float
    p_weights: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    q_weights: Tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        for label, weights in (("active", self.p_weights), ("reactive", self.q_weights)):
            if len(weights) != 3:
                raise ParameterError(f"load {self.id}: {label} ZIP weights need 3 entries")
            if abs(sum(weights)) < 1e-12:
                raise ParameterError(f"load {self.id}: {label} ZIP weights sum to zero")

    @property
    def p_coefficients(self) -> Tuple[float, float, float]:
        total = sum(self.p_weights)
        return tuple(w / total for w in self.p_weights)

    @property
    def q_coefficients(self) -> Tuple[float, float, float]:
        total = sum(self.q_weights)
        return tuple(w / total for w in self.q_weights)

    def scaled(self, factor: float) -> "ZipLoad":
        return ZipLoad(self.id, self.bus, self.p_mw * factor, self.q_mvar * factor, self.p_weights, self.q_weights)


def zip_injection(load: ZipLoad, v, s_base: float):
    """Injection current (re, im) of a ZIP load at bus voltage v = (a, b), system pu."""
    a, b = v[0], v[1]
    p0 = load.p_mw / s_base
    q0 = load.q_mvar / s_base
    pz, pi, pp = load.p_coefficients
    qz, qi, qp = load.q_coefficients
    m2 = a * a + b * b
    m = np.sqrt(m2)
    p = p0 * (pz * m2 + pi * m + pp)
    q = q0 * (qz * m2 + qi * m + qp)
    return np.array([-(p * a + q * b) / m2, -(p * b - q * a) / m2])


# ============================================================================
# Dynamic units
# ============================================================================

class SgReference(NamedTuple):
    tm: float       # mechanical torque, machine pu
    vref: float


class IgReference(NamedTuple):
    i_re: float     # held in-phase current reference, machine pu
    i_im0: float    # dispatch quadrature current, machine pu
    vref: float


class UnitLinearization(NamedTuple):
    unit_id: str
    bus: str
    labels: Tuple[str, ...]
    a: np.ndarray       # df/dx
    b_v: np.ndarray     # df/dV (n x 2)
    b_u: np.ndarray     # df/du (n,)
    c_x: np.ndarray     # dI/dx (2 x n)
    d_v: np.ndarray     # -dI/dV (2 x 2)
    vm_index: int


class SynchronousMachine:
    kind = "sg"
    state_names = ("delta", "omega", "eq_p", "ed_p", "eq_pp", "ed_pp", "vm", "x_avr", "x_ll", "efd")
    vm_index = 6
    integrator = "x_avr"

    def __init__(self, unit_id: str, bus: str, params: SgParams, s_base: float, f_hz: float):
        params.validate()
        self.unit_id = unit_id
        self.bus = bus
        self.params = params
        self.scale = params.s_n / s_base
        self.w_b = 2.0 * math.pi * f_hz

    def _stator(self, x, v):
        p = self.params
        delta, eq_pp, ed_pp = x[0], x[4], x[5]
        a, b = v[0], v[1]
        sin_d, cos_d = np.sin(delta), np.cos(delta)
        vd = a * sin_d - b * cos_d
        vq = a * cos_d + b * sin_d
        id_ = (eq_pp - vq) / p.xd_pp
        iq = (vd - ed_pp) / p.xq_pp
        return vd, vq, id_, iq, sin_d, cos_d

    def derivative(self, x, v, u, ref: SgReference):
        p = self.params
        omega, eq_p, ed_p, eq_pp, ed_pp = x[1], x[2], x[3], x[4], x[5]
        vm, x_avr, x_ll, efd = x[6], x[7], x[8], x[9]
        vd, vq, id_, iq, _, _ = self._stator(x, v)
        pe = vd * id_ + vq * iq
        vmag = np.sqrt(v[0] * v[0] + v[1] * v[1])
        err = ref.vref - vm
        # supplementary signal enters behind the PI regulator
        y = p.p_v * err + x_avr + u
        lead = p.t_c / p.t_b
        z = lead * y + (1.0 - lead) * x_ll
        return np.array([
            self.w_b * (omega - 1.0),
            (ref.tm - pe - p.d * (omega - 1.0)) / p.m,
            (-eq_p - (p.xd - p.xd_p) * id_ + efd) / p.td0_p,
            (-ed_p + (p.xq - p.xq_p) * iq) / p.tq0_p,
            (eq_p - eq_pp - (p.xd_p - p.xd_pp) * id_) / p.td0_pp,
            (ed_p - ed_pp + (p.xq_p - p.xq_pp) * iq) / p.tq0_pp,
            (vmag - vm) / p.t_r,
            p.i_v * err,
            (y - x_ll) / p.t_b,
            (p.k_a * z - efd) / p.t_a,
        ])

    def injection(self, x, v):
        _, _, id_, iq, sin_d, cos_d = self._stator(x, v)
        return np.array([iq * cos_d + id_ * sin_d, iq * sin_d - id_ * cos_d]) * self.scale

    def initialize(self, v: complex, s_inj: complex):
        """Equilibrium states for terminal voltage v and injected power s_inj (system pu)."""
        p = self.params
        i_m = np.conj(s_inj / v) / self.scale
        delta = float(np.angle(v + 1j * p.xq * i_m))
        rot = np.exp(-1j * (delta - math.pi / 2.0))
        vdq = v * rot
        idq = i_m * rot
        vd, vq = vdq.real, vdq.imag
        id_, iq = idq.real, idq.imag
        ed_pp = vd - p.xq_pp * iq
        ed_p = (p.xq - p.xq_p) * iq
        eq_pp = vq + p.xd_pp * id_
        eq_p = eq_pp + (p.xd_p - p.xd_pp) * id_
        efd = eq_p + (p.xd - p.xd_p) * id_
        vmag = abs(v)
        ref = SgReference(tm=vd * id_ + vq * iq, vref=vmag)
        x0 = np.array([delta, 1.0, eq_p, ed_p, eq_pp, ed_pp, vmag, efd / p.k_a, efd / p.k_a, efd])
        return x0, ref


class InverterUnit:
    kind = "ig"
    state_names = ("i_re", "i_im", "z_re", "z_im", "vm", "x_v")
    vm_index = 4
    integrator = "x_v"

    def __init__(self, unit_id: str, bus: str, params: IgParams, s_base: float, f_hz: float, kv: float):
        params.validate()
        self.unit_id = unit_id
        self.bus = bus
        self.params = params
        self.scale = params.s_n / s_base
        self.w_b = 2.0 * math.pi * f_hz
        z_base = kv * kv / params.s_n
        self.x_f = self.w_b * params.l_f / z_base
        self.r_f = params.r_f / z_base
        self.k_p = params.p_i / z_base
        self.k_i = params.i_i / z_base

    def derivative(self, x, v, u, ref: IgReference):
        p = self.params
        i_re, i_im, z_re, z_im, vm, x_v = x[0], x[1], x[2], x[3], x[4], x[5]
        vmag = np.sqrt(v[0] * v[0] + v[1] * v[1])
        y_v = p.p_v * (ref.vref - vm) + x_v
        e_re = ref.i_re - i_re
        e_im = ref.i_im0 - y_v - u - i_im
        gain = self.w_b / self.x_f
        d_re = gain * (self.k_p * e_re + z_re - self.r_f * i_re)
        d_im = gain * (self.k_p * e_im + z_im - self.r_f * i_im)
        if not p.decoupling:
            d_re = d_re + self.w_b * i_im
            d_im = d_im - self.w_b * i_re
        return np.array([
            d_re,
            d_im,
            self.k_i * e_re,
            self.k_i * e_im,
            (vmag - vm) / p.t_r,
            p.i_v * (ref.vref - vm),
        ])

    def injection(self, x, v):
        return np.array([x[0], x[1]]) * self.scale

    def initialize(self, v: complex, s_inj: complex, ref: IgReference = None):
        """Equilibrium states; without a held reference the unit is at its dispatch point."""
        i_m = np.conj(s_inj / v) / self.scale
        vmag = abs(v)
        if ref is None:
            ref = IgReference(i_re=i_m.real, i_im0=i_m.imag, vref=vmag)
        z = self.r_f * i_m
        if not self.params.decoupling:
            z = z + 1j * self.x_f * i_m
        x0 = np.array([i_m.real, i_m.imag, z.real, z.imag, vmag, ref.i_im0 - i_m.imag])
        return x0, ref


def linearize_unit(model, x0, v0, ref) -> UnitLinearization:
    """Jacobians of one unit at (x0, v0, u = 0)."""
    n = len(model.state_names)
    z0 = np.concatenate([np.asarray(x0, dtype=float), np.asarray(v0, dtype=float), [0.0]])
    jf = complex_step_jacobian(lambda z: model.derivative(z[:n], z[n:n + 2], z[n + 2], ref), z0)
    jh = complex_step_jacobian(lambda z: model.injection(z[:n], z[n:n + 2]), z0)
    labels = tuple(f"{model.unit_id}.{name}" for name in model.state_names)
    return UnitLinearization(
        unit_id=model.unit_id,
        bus=model.bus,
        labels=labels,
        a=jf[:, :n],
        b_v=jf[:, n:n + 2],
        b_u=jf[:, n + 2],
        c_x=jh[:, :n],
        d_v=-jh[:, n:n + 2],
        vm_index=model.vm_index,
    )
