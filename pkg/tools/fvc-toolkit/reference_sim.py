"""Nonlinear reference simulation of one switch event.

The component models of ``components`` are integrated directly, with the
algebraic network solved by Newton at every right-hand-side evaluation. Used as
the oracle of the linear step response; feedforward input is optional.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from components import zip_injection
from errors import ConfigurationError, IntegrationError, PowerFlowError
from netmodel import NetworkDescription, build_admittance, solve_steady_state
from utils import complex_step_jacobian

logger = logging.getLogger(__name__)


@dataclass
class ReferenceResult:
    times: np.ndarray
    states: np.ndarray                  # len(times) x n
    state_labels: Tuple[str, ...]
    dv: Dict[str, np.ndarray]           # measured terminal voltage minus reference, per unit
    vbus: Dict[str, np.ndarray]         # bus voltage magnitudes


class _AlgebraicNetwork:
    def __init__(self, network: NetworkDescription, switch_states, models, guess: Dict[str, complex]):
        adm = build_admittance(network, switch_states, allow_dead_islands=True)
        index = network.bus_index
        self.network = network
        self.live = [b for b in adm.energized if b != network.slack]
        stranded = [m.unit_id for m in models if m.bus not in self.live]
        if stranded:
            raise ConfigurationError(f"units {stranded} are outside the energized network")
        self.rows = np.array([r for b in self.live for r in (2 * index[b], 2 * index[b] + 1)], dtype=int)
        self.index = index
        self.ydq = adm.ydq
        self.loads = [ld for ld in network.loads if ld.bus in self.live]
        self.models = models
        self.v = np.array([c for b in self.live for c in (guess[b].real, guess[b].imag)])

    def _full(self, v_live):
        vdq = np.zeros(self.ydq.shape[0], dtype=v_live.dtype)
        vdq[2 * self.index[self.network.slack]] = 1.0
        vdq[self.rows] = v_live
        return vdq

    def mismatch(self, v_live, parts):
        vdq = self._full(v_live)
        inj = np.zeros_like(vdq)
        for ld in self.loads:
            k = self.index[ld.bus]
            inj[2 * k:2 * k + 2] += zip_injection(ld, vdq[2 * k:2 * k + 2], self.network.base_mva)
        for model, x in zip(self.models, parts):
            k = self.index[model.bus]
            inj[2 * k:2 * k + 2] += model.injection(x, vdq[2 * k:2 * k + 2])
        return (inj - self.ydq @ vdq)[self.rows]

    def solve(self, parts, tol: float = 1e-10, max_iter: int = 30) -> np.ndarray:
        v = self.v.copy()
        for iteration in range(1, max_iter + 1):
            f = self.mismatch(v, parts)
            residual = float(np.max(np.abs(f))) if f.size else 0.0
            if residual < tol:
                self.v = v
                return self._full(v)
            v = v + np.linalg.solve(complex_step_jacobian(lambda z: self.mismatch(z, parts), v), -f)
        raise PowerFlowError("network solve failed inside the reference simulation", residual, max_iter)


def simulate_nonlinear(
    network: NetworkDescription,
    pre_states: Mapping[str, bool],
    post_states: Mapping[str, bool],
    t_end: float,
    setpoints: Optional[Mapping[str, tuple]] = None,
    offline: Sequence[str] = (),
    u_ff: Optional[Callable[[float], np.ndarray]] = None,
    t_eval: Optional[np.ndarray] = None,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    max_step: float = 0.01,
) -> ReferenceResult:
    """Response to switching from ``pre_states`` to ``post_states`` at t = 0."""
    op = solve_steady_state(network, pre_states, setpoints, offline)
    refs = dict(setpoints) if setpoints else op.references()
    models = [m for m in network.units() if m.unit_id in op.dg]
    post = solve_steady_state(network, post_states, refs, offline)
    guess = {b: (op.voltage(b) if abs(op.voltage(b)) > 0 else post.voltage(b)) for b in network.bus_ids}
    grid = _AlgebraicNetwork(network, post_states, models, guess)

    sizes = [len(m.state_names) for m in models]
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    labels = tuple(f"{m.unit_id}.{name}" for m in models for name in m.state_names)
    x0 = np.concatenate([op.dg[m.unit_id].x0 for m in models])

    def split(x):
        return [x[bounds[g]:bounds[g + 1]] for g in range(len(models))]

    def rhs(t, x):
        parts = split(x)
        vdq = grid.solve(parts)
        u = u_ff(t) if u_ff is not None else np.zeros(len(models))
        out = []
        for g, (model, xu) in enumerate(zip(models, parts)):
            k = grid.index[model.bus]
            out.append(model.derivative(xu, vdq[2 * k:2 * k + 2], u[g], refs[model.unit_id]))
        return np.concatenate(out)

    sol = solve_ivp(rhs, (0.0, t_end), x0, method="BDF", t_eval=t_eval, rtol=rtol, atol=atol, max_step=max_step)
    if not sol.success:
        raise IntegrationError(f"reference integration failed: {sol.message}", len(sol.t))
    logger.debug("reference simulation: %d samples, %d right-hand-side calls", sol.t.size, sol.nfev)

    states = sol.y.T
    dv = {m.unit_id: states[:, bounds[g] + m.vm_index] - refs[m.unit_id].vref for g, m in enumerate(models)}
    vbus = {b: np.zeros(sol.t.size) for b in grid.live}
    for row, x in enumerate(states):
        vdq = grid.solve(split(x))
        for b in grid.live:
            k = grid.index[b]
            vbus[b][row] = float(np.hypot(vdq[2 * k], vdq[2 * k + 1]))
    return ReferenceResult(sol.t, states, labels, dv, vbus)
