"""Frequency-domain analysis of the switched plant and its feedforward loop.

Frequencies on grids and in output files are in Hz; internal evaluation is in
rad/s. Transfer matrices are always evaluated with linear solves.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import control
import numpy as np
import scipy.linalg

from configuration import AnalysisSettings
from errors import AssemblyError, ParameterError, PoleOnAxisError, UnstableSystemError
from utils import is_hurwitz

logger = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class LtiSystem:
    """State-space quadruple kept exactly as given (no state elimination)."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: Optional[np.ndarray] = None

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float)) if np.size(self.a) else np.zeros((0, 0))
        n = self.a.shape[0]
        self.b = np.asarray(self.b, dtype=float).reshape(n, -1) if n else np.atleast_2d(np.asarray(self.b, dtype=float)).reshape(0, -1)
        self.c = np.asarray(self.c, dtype=float).reshape(-1, n) if n else np.atleast_2d(np.asarray(self.c, dtype=float)).reshape(-1, 0)
        if self.d is None:
            self.d = np.zeros((self.c.shape[0], self.b.shape[1]))
        self.d = np.asarray(self.d, dtype=float).reshape(self.c.shape[0], self.b.shape[1])

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def evaluate(self, omega: float) -> np.ndarray:
        if self.n == 0:
            return self.d.astype(complex)
        resolvent = np.linalg.solve(1j * omega * np.eye(self.n) - self.a, self.b)
        return self.c @ resolvent + self.d

    def dc_gain(self) -> np.ndarray:
        if self.n == 0:
            return self.d.copy()
        return self.c @ np.linalg.solve(-self.a, self.b) + self.d


def plant_system(dn) -> LtiSystem:
    """Feedback-only loop: C_DG (sI - A_DN)^-1 B_NR."""
    return LtiSystem(dn.a, dn.b_nr, dn.c_dg)


def controller_system(fvc) -> LtiSystem:
    return LtiSystem(fvc.a_ff, fvc.b_ff, fvc.c_ff)


# ============================================================================
# Overall system
# ============================================================================

@dataclass
class OverallStateSpace:
    a_od: np.ndarray
    b_od: np.ndarray
    c_od: np.ndarray
    state_labels: Tuple[str, ...]

    def system(self) -> LtiSystem:
        return LtiSystem(self.a_od, self.b_od, self.c_od)


def assemble_overall(dn, fvc) -> OverallStateSpace:
    """A_OD = [[A_DN, B_DG C_FF], [0, A_FF]], B_OD = [B_NR; B_FF], C_OD = [C_DG, 0].

    The controller order q is normally the plant order n; a controller designed
    for a communication delay carries 2m extra states.
    """
    n, m = dn.n, dn.m
    a_ff = np.atleast_2d(np.asarray(fvc.a_ff, dtype=float))
    b_ff = np.asarray(fvc.b_ff, dtype=float)
    c_ff = np.atleast_2d(np.asarray(fvc.c_ff, dtype=float))
    q = a_ff.shape[0]
    if a_ff.shape != (q, q) or q < n:
        raise AssemblyError(f"A_FF is {a_ff.shape}, plant order is {n}", block="A_OD")
    if b_ff.size != q:
        raise AssemblyError(f"B_FF has {b_ff.size} entries, expected {q}", block="B_OD")
    if c_ff.shape != (m, q):
        raise AssemblyError(f"C_FF is {c_ff.shape}, expected {(m, q)}", block="A_OD")
    a_od = np.block([[dn.a, dn.b_dg @ c_ff], [np.zeros((q, n)), a_ff]])
    b_od = np.vstack([dn.b_nr, b_ff.reshape(q, 1)])
    c_od = np.hstack([dn.c_dg, np.zeros((m, q))])
    if q == n:
        ff_labels = tuple(f"ff.{label}" for label in dn.state_labels)
    else:
        ff_labels = tuple(f"ff.x{k}" for k in range(q))
    return OverallStateSpace(a_od, b_od, c_od, tuple(dn.state_labels) + ff_labels)


def eigenvalues(a) -> np.ndarray:
    """Full spectrum, ordered by real then imaginary part."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros(0, dtype=complex)
    w, v = scipy.linalg.eig(a)
    scale = max(np.linalg.norm(a, 2), 1e-300)
    residual = np.max(np.linalg.norm(a @ v - v * w, axis=0)) / scale
    if residual > 1e-8:
        logger.warning("eigenpair residual %.2e exceeds 1e-8 relative", residual)
    return w[np.lexsort((w.imag, w.real))]


# ============================================================================
# Frequency response
# ============================================================================

@dataclass
class FrequencyResponseData:
    freq_hz: np.ndarray
    sigma: np.ndarray                       # points x min(p, m), descending per row
    responses: Optional[np.ndarray] = None  # points x p x m complex

    @property
    def peak(self) -> float:
        return float(np.max(self.sigma[:, 0])) if self.sigma.size else 0.0


def _axis_poles(sys: LtiSystem) -> np.ndarray:
    if sys.n == 0:
        return np.zeros(0)
    eig = np.linalg.eigvals(sys.a)
    scale = max(1.0, float(np.max(np.abs(eig))))
    return np.abs(eig[np.abs(eig.real) <= 1e-12 * scale].imag)


def _check_axis(axis_poles: np.ndarray, omega: float):
    if axis_poles.size and np.any(np.abs(axis_poles - abs(omega)) <= 1e-9 * max(1.0, abs(omega))):
        raise PoleOnAxisError(f"pole on the imaginary axis at {omega / (2 * math.pi):.6g} Hz")


def frequency_response(sys: LtiSystem, grid_hz: Sequence[float], keep_responses: bool = False) -> FrequencyResponseData:
    grid = np.asarray(grid_hz, dtype=float)
    if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ParameterError("frequency grid must be nonempty, positive and strictly increasing")
    axis = _axis_poles(sys)
    k = min(sys.c.shape[0], sys.b.shape[1])
    sigma = np.zeros((grid.size, k))
    responses = np.zeros((grid.size, sys.c.shape[0], sys.b.shape[1]), dtype=complex) if keep_responses else None
    for idx, f in enumerate(grid):
        omega = 2.0 * math.pi * f
        _check_axis(axis, omega)
        try:
            g = sys.evaluate(omega)
        except np.linalg.LinAlgError:
            raise PoleOnAxisError(f"singular resolvent at {f:.6g} Hz")
        sigma[idx] = np.linalg.svd(g, compute_uv=False)
        if keep_responses:
            responses[idx] = g
    return FrequencyResponseData(grid, sigma, responses)


def _sigma_max(sys: LtiSystem, omega: float) -> float:
    return float(np.linalg.svd(sys.evaluate(omega), compute_uv=False)[0])


def _golden_max(fun, lo: float, hi: float, tol: float) -> float:
    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = fun(c), fun(d)
    while hi - lo > tol:
        if fc > fd:
            hi, d, fd = d, c, fc
            c = hi - GOLDEN * (hi - lo)
            fc = fun(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + GOLDEN * (hi - lo)
            fd = fun(d)
    return max(fc, fd)


def hinf_norm(sys: LtiSystem, tol: float = 1e-6, grid_hz: Optional[Sequence[float]] = None, refine_peaks: int = 5) -> float:
    """Peak singular value: log-grid sweep, DC, then golden-section refinement of the top peaks."""
    if not is_hurwitz(sys.a):
        raise UnstableSystemError("H-infinity norm requires a Hurwitz A")
    if sys.n == 0:
        return float(np.linalg.svd(sys.d, compute_uv=False)[0]) if sys.d.size else 0.0
    grid = np.asarray(grid_hz if grid_hz is not None else AnalysisSettings().grid_hz(), dtype=float)
    omegas = 2.0 * math.pi * grid
    values = np.array([_sigma_max(sys, w) for w in omegas])
    best = max(float(values.max()), float(np.linalg.svd(sys.dc_gain(), compute_uv=False)[0]))

    peaks = [i for i in range(len(values))
             if (i == 0 or values[i] >= values[i - 1]) and (i == len(values) - 1 or values[i] >= values[i + 1])]
    peaks = sorted(peaks, key=lambda i: -values[i])[:max(refine_peaks, 0)]
    log_w = np.log(omegas)
    for i in peaks:
        lo = log_w[max(i - 1, 0)]
        hi = log_w[min(i + 1, len(omegas) - 1)]
        if hi <= lo:
            continue
        best = max(best, _golden_max(lambda lw: _sigma_max(sys, math.exp(lw)), lo, hi, tol))
    return best


def hinf_norm_hamiltonian(sys: LtiSystem, tol: float = 1e-6, max_iter: int = 200) -> float:
    """Two-sided bisection on the Hamiltonian imaginary-axis eigenvalue test (strictly proper systems)."""
    if not is_hurwitz(sys.a):
        raise UnstableSystemError("H-infinity norm requires a Hurwitz A")
    if np.any(sys.d):
        raise ParameterError("Hamiltonian test is implemented for strictly proper systems only")
    if sys.n == 0:
        return 0.0
    eig = np.linalg.eigvals(sys.a)
    probes = [0.0] + [abs(w.imag) for w in eig] + [abs(w) for w in eig]
    lower = max(_sigma_max(sys, w) for w in probes)
    if lower == 0.0:
        return 0.0
    bbt = sys.b @ sys.b.T
    ctc = sys.c.T @ sys.c
    for _ in range(max_iter):
        gamma = (1.0 + 2.0 * tol) * lower
        ham = np.block([[sys.a, bbt / gamma ** 2], [-ctc, -sys.a.T]])
        lam = np.linalg.eigvals(ham)
        scale = max(1.0, float(np.max(np.abs(lam))))
        freqs = np.sort(np.unique(np.round(lam[(np.abs(lam.real) < 1e-8 * scale) & (lam.imag >= 0)].imag, 12)))
        if freqs.size == 0:
            return 0.5 * (lower + gamma)
        if freqs.size == 1:
            mids = freqs
        else:
            mids = 0.5 * (freqs[:-1] + freqs[1:])
        candidate = max(_sigma_max(sys, w) for w in mids)
        if candidate <= lower:
            return 0.5 * (lower + gamma)
        lower = candidate
    return lower


def controllability_gramian(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return scipy.linalg.solve_continuous_lyapunov(a, -b @ b.T)


def h2_norm(sys: LtiSystem) -> float:
    if not is_hurwitz(sys.a):
        raise UnstableSystemError("H2 norm requires a Hurwitz A")
    if np.any(sys.d):
        raise ParameterError("H2 norm is infinite with direct feedthrough")
    if sys.n == 0:
        return 0.0
    gram = controllability_gramian(sys.a, sys.b)
    return float(math.sqrt(max(np.trace(sys.c @ gram @ sys.c.T), 0.0)))


# ============================================================================
# Communication delay
# ============================================================================

@dataclass(frozen=True)
class PadeFactor:
    """Second-order all-pass approximation of exp(-s T_d)."""

    t_d: float
    num: Tuple[float, ...]
    den: Tuple[float, ...]

    def evaluate(self, s) -> complex:
        return np.polyval(self.num, s) / np.polyval(self.den, s)

    def realization(self) -> LtiSystem:
        if self.t_d == 0:
            return LtiSystem(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), np.ones((1, 1)))
        ss = control.tf2ss(list(self.num), list(self.den))
        return LtiSystem(np.asarray(ss.A), np.asarray(ss.B), np.asarray(ss.C), np.asarray(ss.D))


def pade_delay_factor(t_d: float) -> PadeFactor:
    if t_d < 0:
        raise ParameterError(f"delay must be >= 0, got {t_d}")
    num, den = control.pade(float(t_d), 2)
    return PadeFactor(float(t_d), tuple(float(v) for v in num), tuple(float(v) for v in den))


@dataclass
class DelayedModel:
    t_d: float
    pade: PadeFactor
    system: LtiSystem
    state_labels: Tuple[str, ...]


def assemble_delayed(dn, fvc, t_d: float) -> DelayedModel:
    """Plant channel driven by u directly, feedforward channel by the delayed u.

    States are ordered [pade; plant; controller].
    """
    pade = pade_delay_factor(t_d)
    overall = assemble_overall(dn, fvc)
    if t_d == 0:
        return DelayedModel(0.0, pade, overall.system(), overall.state_labels)
    p = pade.realization()
    n, m, k = dn.n, dn.m, p.n
    q = overall.a_od.shape[0] - n
    b_ff = np.asarray(fvc.b_ff, dtype=float).reshape(q, 1)
    a = np.block([
        [p.a, np.zeros((k, n + q))],
        [np.zeros((n, k)), overall.a_od[:n]],
        [b_ff @ p.c, overall.a_od[n:]],
    ])
    b = np.vstack([p.b, dn.b_nr, b_ff @ p.d])
    c = np.hstack([np.zeros((m, k)), overall.c_od])
    labels = tuple(f"pade.{i}" for i in range(k)) + overall.state_labels
    return DelayedModel(float(t_d), pade, LtiSystem(a, b, c), labels)
