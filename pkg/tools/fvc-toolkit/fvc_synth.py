"""Robust feedforward voltage controller synthesis.

The controller dx_ff/dt = A_FF x_ff + B_FF u, u_ff = C_FF x_ff has the plant's
order (plus two pade states per DG when it is designed for a communication
delay). Its parameters are found by minimizing J subject to a bounded-real
block per polytope vertex, a coupling block and an energy bound on the
feedforward signal, all affine in (J, L1..L5, U). The solved variables map
back to (A_FF, B_FF, C_FF) in closed form.
"""

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from configuration import SynthesisSettings
from errors import AssemblyError, FvcToolkitError, Infeasible, ParameterError, ReconstructionError, RecoveryError, SolverError
from lmi import ConstraintBlock, CvxpyBackend, LmiProgram, NUMPY_OPS, VariableCatalog
from netmodel import DnStateSpace
from ssanalysis import LtiSystem, assemble_overall, controllability_gramian, hinf_norm, pade_delay_factor
from utils import is_hurwitz, matrix_to_json, symmetrize

logger = logging.getLogger(__name__)

UNCERTAIN_SCALARS = ("ka", "lf", "sr")
SOUNDNESS_SLACK = 1e-4


# ============================================================================
# Polytope
# ============================================================================

@dataclass(frozen=True)
class UncertaintySpec:
    """Estimation error fractions of K_A, L_f and the restored load rating S_r."""

    ka: float = 0.0
    lf: float = 0.0
    sr: float = 0.0

    def __post_init__(self):
        for name in UNCERTAIN_SCALARS:
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ParameterError(f"uncertainty fraction {name} must be in [0, 1), got {value}")

    @classmethod
    def from_mapping(cls, values: Optional[dict]) -> "UncertaintySpec":
        values = values or {}
        return cls(**{k: float(values.get(k, 0.0)) for k in UNCERTAIN_SCALARS})

    def active(self) -> Tuple[str, ...]:
        return tuple(name for name in UNCERTAIN_SCALARS if getattr(self, name) > 0)

    def vertex_scales(self) -> List[Dict[str, float]]:
        names = self.active()
        scales = []
        for signs in itertools.product((-1, 1), repeat=len(names)):
            scale = {name: 1.0 for name in UNCERTAIN_SCALARS}
            for name, sign in zip(names, signs):
                scale[name] = 1.0 + sign * getattr(self, name)
            scales.append(scale)
        return scales

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in UNCERTAIN_SCALARS}


@dataclass
class Vertex:
    signature: str
    scales: Dict[str, float]
    model: object       # netmodel.DnStateSpace


def _signature(spec: UncertaintySpec, scales: Dict[str, float]) -> str:
    active = spec.active()
    if not active:
        return "nominal"
    return ",".join(f"{name}{'+' if scales[name] > 1.0 else '-'}" for name in active)


def enumerate_polytope(builder, spec: UncertaintySpec, threads: int = 1) -> List[Vertex]:
    """One model per sign combination of the active scalars.

    ``builder`` is anything with ``build(ka, lf, sr)`` returning a
    DnStateSpace, normally a netmodel.SwitchModelBuilder.
    """

    def build(scales):
        signature = _signature(spec, scales)
        try:
            model = builder.build(ka=scales["ka"], lf=scales["lf"], sr=scales["sr"])
        except FvcToolkitError as exc:
            raise AssemblyError(str(exc), block=f"vertex [{signature}]") from exc
        return Vertex(signature, scales, model)

    scales = spec.vertex_scales()
    if threads > 1 and len(scales) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            vertices = list(pool.map(build, scales))
    else:
        vertices = [build(s) for s in scales]

    reference = vertices[0].model
    for vertex in vertices[1:]:
        if vertex.model.a.shape != reference.a.shape or vertex.model.b_dg.shape != reference.b_dg.shape:
            raise AssemblyError("vertex dimensions differ from the first vertex", block=f"vertex [{vertex.signature}]")
        vertex.model.c_dg = reference.c_dg.copy()
    logger.debug("polytope: %d vertices over %s", len(vertices), ", ".join(spec.active()) or "no uncertainty")
    return vertices


def delay_augmented(model, delay_s: float):
    """Plant seen by a controller whose input arrives ``delay_s`` late.

    The delay acts on the scalar u, so it commutes with the controller and can
    sit on the actuator side instead: one second-order pade block per DG
    channel between the controller output and B_DG. The returned model has
    n + 2m states and the same output map.
    """
    if delay_s <= 0:
        return model
    pade = pade_delay_factor(delay_s).realization()
    n, m, k = model.n, model.m, pade.n
    eye = np.eye(m)
    a_p, b_p, c_p, d_p = (np.kron(eye, mat) for mat in (pade.a, pade.b, pade.c, pade.d))
    a = np.block([[model.a, model.b_dg @ c_p], [np.zeros((m * k, n)), a_p]])
    labels = tuple(model.state_labels) + tuple(f"delay.{dg}.{i}" for dg in model.dg_ids for i in range(k))
    return DnStateSpace(
        a=a,
        b_dg=np.vstack([model.b_dg @ d_p, b_p]),
        b_nr=np.vstack([model.b_nr, np.zeros((m * k, 1))]),
        c_dg=np.hstack([model.c_dg, np.zeros((m, m * k))]),
        state_labels=labels,
        output_labels=model.output_labels,
        dg_ids=model.dg_ids,
        bus_order=model.bus_order,
    )


# ============================================================================
# Program
# ============================================================================

def _c1_builder(a, b_dg, b_nr, c_dg):
    n, m = a.shape[0], c_dg.shape[0]

    def build(ops, v):
        l1, l2, l3, l4, l5, j = v["L1"], v["L2"], v["L3"], v["L4"], v["L5"], v["J"]
        m11 = a @ l2 + b_dg @ l5 + l2 @ a.T + l5.T @ b_dg.T
        m12 = a @ l1 + l2 @ a.T + l5.T @ b_dg.T + l3.T
        m22 = a @ l1 + l1 @ a.T
        m23 = b_nr + l4
        m14 = l2 @ c_dg.T
        m24 = l1 @ c_dg.T
        return ops.bmat([
            [m11, m12, b_nr, m14],
            [m12.T, m22, m23, m24],
            [b_nr.T, m23.T, -np.eye(1), np.zeros((1, m))],
            [m14.T, m24.T, np.zeros((m, 1)), -j * np.eye(m)],
        ])

    return build


def _c2(ops, v):
    return ops.bmat([[v["L2"], v["L1"]], [v["L1"], v["L1"]]])


def _c3(ops, v):
    return ops.bmat([[v["L2"] - v["L1"], v["L5"].T], [v["L5"], v["U"]]])


def _trace_bound(gamma):
    return lambda ops, v: ops.scalar(gamma - ops.trace(v["U"]))


def _check_vertex(vertex: Vertex, n: int, m: int):
    model = vertex.model
    expected = {"A_DN": (n, n), "B_DG": (n, m), "B_NR": (n, 1), "C_DG": (m, n)}
    actual = {"A_DN": model.a.shape, "B_DG": model.b_dg.shape, "B_NR": model.b_nr.shape, "C_DG": model.c_dg.shape}
    for name, shape in expected.items():
        if actual[name] != shape:
            raise AssemblyError(f"{name} is {actual[name]}, expected {shape}", block=f"C1[{vertex.signature}]")


def reference_point(n: int, m: int) -> Dict[str, np.ndarray]:
    """Feasible-looking interior point used to equilibrate the blocks."""
    return {
        "J": 1.0,
        "L1": np.eye(n),
        "L2": 2.0 * np.eye(n),
        "L3": -np.eye(n),
        "L4": np.zeros((n, 1)),
        "L5": np.zeros((m, n)),
        "U": np.eye(m),
    }


def assemble_program(
    vertices: Sequence[Vertex],
    gamma: float,
    eps: Optional[float] = None,
    eps_rel: float = 1e-7,
    energy_bound: bool = True,
    equilibrate: bool = True,
) -> LmiProgram:
    if not vertices:
        raise AssemblyError("no vertex models", block="C1")
    n, m = vertices[0].model.n, vertices[0].model.m
    for vertex in vertices:
        _check_vertex(vertex, n, m)

    if eps is None:
        largest = max(
            float(np.max(np.abs(mat))) if mat.size else 0.0
            for vertex in vertices
            for mat in (vertex.model.a, vertex.model.b_dg, vertex.model.b_nr, vertex.model.c_dg)
        )
        eps = eps_rel * max(largest, 1.0)

    catalog = VariableCatalog()
    catalog.add("J", ())
    catalog.add("L1", (n, n), symmetric=True)
    catalog.add("L2", (n, n), symmetric=True)
    catalog.add("L3", (n, n))
    catalog.add("L4", (n, 1))
    catalog.add("L5", (m, n))
    catalog.add("U", (m, m), symmetric=True)

    blocks = []
    for vertex in vertices:
        model = vertex.model
        blocks.append(ConstraintBlock(
            f"C1[{vertex.signature}]", "bounded_real", "nsd",
            _c1_builder(model.a, model.b_dg, model.b_nr, model.c_dg), margin=eps,
        ))
    blocks.append(ConstraintBlock("C2", "coupling", "psd", _c2, margin=eps))
    blocks.append(ConstraintBlock("L1", "positivity", "psd", lambda ops, v: v["L1"], margin=eps))
    blocks.append(ConstraintBlock("L2", "positivity", "psd", lambda ops, v: v["L2"], margin=eps))
    blocks.append(ConstraintBlock("J", "positivity", "psd", lambda ops, v: ops.scalar(v["J"])))
    if energy_bound:
        blocks.append(ConstraintBlock("C3", "energy", "psd", _c3, margin=eps))
        blocks.append(ConstraintBlock("trace", "energy", "psd", _trace_bound(gamma), margin=eps))

    program = LmiProgram(
        catalog,
        blocks,
        objective="J",
        eps=eps,
        metadata={
            "gamma": float(gamma),
            "energy_bound": energy_bound,
            "n": n,
            "m": m,
            "vertices": [v.signature for v in vertices],
        },
    )
    if equilibrate:
        program.equilibrate(reference_point(n, m))
    logger.debug("program: %d blocks, %d scalar unknowns, eps=%.3e", len(blocks), catalog.size, eps)
    return program


# ============================================================================
# Solve
# ============================================================================

@dataclass
class SynthesisCertificate:
    status: str
    gamma: float
    eps: float
    j_opt: float = float("nan")
    l1: Optional[np.ndarray] = None
    l2: Optional[np.ndarray] = None
    l3: Optional[np.ndarray] = None
    l4: Optional[np.ndarray] = None
    l5: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    margins: Dict[str, float] = field(default_factory=dict)
    solver: str = ""
    raw_status: str = ""
    iterations: Optional[int] = None
    wall_time: float = 0.0
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    energy_bound: bool = True
    vertices: Tuple[str, ...] = ()
    j_min: float = float("nan")     # J of the first solve, before reconditioning
    backoff: float = 0.0
    t_gap: float = float("nan")     # floor of (L2 - L1) relative to the L2 cap
    delay_s: float = 0.0

    @property
    def hinf_bound(self) -> float:
        """Bound on the closed-loop H-infinity norm certified by the bounded-real block."""
        return math.sqrt(max(self.j_opt, 0.0))

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def values(self) -> Dict[str, np.ndarray]:
        return {"J": self.j_opt, "L1": self.l1, "L2": self.l2, "L3": self.l3, "L4": self.l4, "L5": self.l5, "U": self.u}

    def to_dict(self) -> dict:
        out = {
            "status": self.status,
            "j_opt": None if math.isnan(self.j_opt) else self.j_opt,
            "hinf_bound": None if math.isnan(self.j_opt) else self.hinf_bound,
            "gamma": self.gamma,
            "eps": self.eps,
            "energy_bound": self.energy_bound,
            "vertices": list(self.vertices),
            "margins": self.margins,
            "solver": self.solver,
            "raw_status": self.raw_status,
            "iterations": self.iterations,
            "feas_tol": self.feas_tol,
            "gap_tol": self.gap_tol,
            "j_min": None if math.isnan(self.j_min) else self.j_min,
            "backoff": self.backoff,
            "t_gap": None if math.isnan(self.t_gap) else self.t_gap,
            "delay_s": self.delay_s,
        }
        if self.optimal:
            out["variables"] = {name.lower(): matrix_to_json(np.atleast_2d(value)) for name, value in self.values().items() if name != "J"}
        return out


def _diagnose(program: LmiProgram, backend: CvxpyBackend) -> str:
    if "energy" not in program.families():
        return "bounded_real"
    try:
        relaxed = backend.solve(program.without(["energy"]), accept_inaccurate=True)
    except SolverError:
        return "bounded_real"
    return "energy" if relaxed.status == "optimal" else "bounded_real"


def conditioning_program(program: LmiProgram, j_level: float, scale: float) -> LmiProgram:
    """Same blocks with J capped at ``j_level``, maximizing the floor of (L2 - L1) / scale.

    L2 is capped at ``scale`` I, so the controller recovery works with
    cond(L2 - L1) <= 1 / T_gap.
    """
    if not scale > 0:
        raise AssemblyError(f"conditioning scale must be > 0, got {scale}", block="gap")
    catalog = VariableCatalog()
    for spec in program.catalog:
        catalog.add(spec.name, spec.shape, spec.symmetric)
    catalog.add("T_gap", ())
    n = program.catalog["L1"].shape[0]
    eye = np.eye(n)

    blocks = list(program.blocks)
    blocks.append(ConstraintBlock("level", "conditioning", "psd", lambda ops, v: ops.scalar(j_level - v["J"])))
    blocks.append(ConstraintBlock("gap", "conditioning", "psd", lambda ops, v: (v["L2"] - v["L1"]) / scale - v["T_gap"] * eye))
    blocks.append(ConstraintBlock("scale", "conditioning", "psd", lambda ops, v: eye - v["L2"] / scale))
    metadata = dict(program.metadata, j_level=float(j_level), scale=float(scale))
    return LmiProgram(catalog, blocks, "T_gap", program.eps, metadata, maximize=True)


def _minimize(program: LmiProgram, backend: CvxpyBackend, accept_inaccurate: bool):
    result = backend.solve(program, accept_inaccurate=accept_inaccurate)
    if result.status == "infeasible":
        family = _diagnose(program, backend)
        raise Infeasible(f"LMI program infeasible at gamma={program.metadata.get('gamma')}", family)
    return result


def _condition(program: LmiProgram, backend: CvxpyBackend, first, backoff: float, attempts: int = 3):
    """Second solve at J <= (1 + backoff) J*, widening the backoff tenfold on failure."""
    j_min = float(first.values["J"])
    scale = max(float(np.linalg.eigvalsh(symmetrize(first.values["L2"]))[-1]), program.eps)
    last = None
    for attempt in range(attempts):
        level = j_min * (1.0 + backoff) + program.eps
        try:
            result = backend.solve(conditioning_program(program, level, scale))
        except SolverError as exc:
            last = exc
        else:
            if result.status == "optimal":
                logger.debug("conditioned at J <= %.6g: T_gap=%.3e", level, result.values["T_gap"])
                return result, backoff
            last = SolverError(f"conditioning stage infeasible at backoff {backoff:g}")
        logger.warning("conditioning attempt %d failed (%s)", attempt + 1, last)
        backoff *= 10.0
    raise SolverError(
        f"no accurate conditioned solution within J <= {j_min:.6g} (1 + {backoff / 10.0:g}): {last}",
        diagnostics={"j_min": j_min},
    )


def solve_lmi(program: LmiProgram, settings: Optional[SynthesisSettings] = None) -> SynthesisCertificate:
    """Minimize J, then recondition the optimum; raises Infeasible naming the binding constraint family.

    The first solve only fixes the level J*. With ``settings.condition`` a
    second solve keeps every block, caps J at (1 + backoff) J* and pushes
    L2 - L1 away from singularity. The certificate comes from the last solve,
    which must report an accurate optimum.
    """
    settings = settings or SynthesisSettings()
    backend = CvxpyBackend(settings.solver, settings.fallback_solver, settings.feas_tol, settings.gap_tol)
    started = time.perf_counter()
    result = _minimize(program, backend, accept_inaccurate=settings.condition)
    j_min = float(result.values["J"])
    backoff, t_gap = 0.0, float("nan")
    if settings.condition:
        result, backoff = _condition(program, backend, result, settings.backoff)
        t_gap = float(result.values["T_gap"])

    values = result.values
    values["L1"] = symmetrize(values["L1"])
    values["L2"] = symmetrize(values["L2"])
    values["U"] = symmetrize(values["U"])
    cert = SynthesisCertificate(
        status="optimal",
        gamma=float(program.metadata.get("gamma", float("nan"))),
        eps=program.eps,
        j_opt=float(values["J"]),
        l1=values["L1"],
        l2=values["L2"],
        l3=values["L3"],
        l4=values["L4"].reshape(-1, 1),
        l5=values["L5"],
        u=values["U"],
        margins=program.margins(values),
        solver=result.solver,
        raw_status=result.raw_status,
        iterations=result.iterations,
        wall_time=time.perf_counter() - started,
        feas_tol=settings.feas_tol,
        gap_tol=settings.gap_tol,
        energy_bound=bool(program.metadata.get("energy_bound", True)),
        vertices=tuple(program.metadata.get("vertices", ())),
        j_min=j_min,
        backoff=backoff,
        t_gap=t_gap,
        delay_s=float(program.metadata.get("delay_s", 0.0)),
    )
    logger.info("LMI solved with %s: J=%.6g (H-inf bound %.6g, J* %.6g) in %.2f s", cert.solver, cert.j_opt, cert.hinf_bound, j_min, cert.wall_time)
    return cert


# ============================================================================
# Controller recovery
# ============================================================================

@dataclass
class FvController:
    a_ff: np.ndarray
    b_ff: np.ndarray
    c_ff: np.ndarray

    def __post_init__(self):
        self.a_ff = np.atleast_2d(np.asarray(self.a_ff, dtype=float))
        self.b_ff = np.asarray(self.b_ff, dtype=float).reshape(self.a_ff.shape[0], 1)
        self.c_ff = np.asarray(self.c_ff, dtype=float).reshape(-1, self.a_ff.shape[0])

    @property
    def order(self) -> int:
        return self.a_ff.shape[0]

    @property
    def state_labels(self) -> Tuple[str, ...]:
        return tuple(f"X_FF[{k}]" for k in range(self.order))

    @classmethod
    def inactive(cls, n: int, m: int) -> "FvController":
        """Stable controller with zero output, i.e. feedback-only operation."""
        return cls(-np.eye(n), np.zeros((n, 1)), np.zeros((m, n)))

    def system(self) -> LtiSystem:
        return LtiSystem(self.a_ff, self.b_ff, self.c_ff)

    def to_dict(self) -> dict:
        return {"a_ff": matrix_to_json(self.a_ff), "b_ff": matrix_to_json(self.b_ff), "c_ff": matrix_to_json(self.c_ff)}


def recover_controller(cert: SynthesisCertificate, cond_limit: float = 1e12, check_stability: bool = True) -> FvController:
    if not cert.optimal:
        raise RecoveryError(f"cannot recover a controller from a '{cert.status}' certificate")
    n = cert.l1.shape[0]
    x = np.linalg.solve(cert.l2, cert.l1).T
    gap = x - np.eye(n)
    cond = float(np.linalg.cond(gap))
    if not np.isfinite(cond) or cond > cond_limit:
        raise RecoveryError(
            f"L1 L2^-1 - I is near singular (condition {cond:.3e}); increase the strictness margin eps",
            condition=cond,
        )
    l3_l2inv = np.linalg.solve(cert.l2, cert.l3.T).T
    a_ff = np.linalg.solve(gap, l3_l2inv)
    b_ff = np.linalg.solve(-gap, cert.l4)
    c_ff = -np.linalg.solve(cert.l2, cert.l5.T).T
    if check_stability and not is_hurwitz(a_ff):
        worst = float(np.max(np.linalg.eigvals(a_ff).real))
        raise RecoveryError(f"recovered A_FF is not Hurwitz (max real part {worst:.3e})", condition=cond)
    logger.debug("controller recovered, cond(L1 L2^-1 - I) = %.3e", cond)
    return FvController(a_ff, b_ff, c_ff)


def change_of_variables(fvc: FvController, l1: np.ndarray, l2: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(L3, L4, L5) for a given controller; inverse of recover_controller."""
    n = l1.shape[0]
    gap = np.linalg.solve(l2, l1).T - np.eye(n)
    l3 = gap @ fvc.a_ff @ l2
    l4 = -gap @ fvc.b_ff
    l5 = -fvc.c_ff @ l2
    return l3, l4, l5


# ============================================================================
# Verification
# ============================================================================

@dataclass
class CheckResult:
    name: str
    status: str         # pass | fail | marginal | info
    margin: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "status": self.status, "margin": self.margin, "detail": self.detail}


@dataclass
class VerificationReport:
    checks: List[CheckResult] = field(default_factory=list)
    q_min_eig: float = float("nan")
    qqinv_residual: float = float("nan")
    c_n_max_eig: Dict[str, float] = field(default_factory=dict)
    congruence_residual: Dict[str, float] = field(default_factory=dict)
    hinf: Dict[str, float] = field(default_factory=dict)
    hinf_bound: float = float("nan")
    energy_gramian: float = float("nan")

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.status != "fail" for c in self.checks)

    def add(self, name: str, ok: bool, margin: float, detail: str = "", marginal: bool = False):
        status = "pass" if ok else "fail"
        if ok and marginal:
            status = "marginal"
        self.checks.append(CheckResult(name, status, float(margin), detail))

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
            "q_min_eig": self.q_min_eig,
            "qqinv_residual": self.qqinv_residual,
            "c_n_max_eig": self.c_n_max_eig,
            "congruence_residual": self.congruence_residual,
            "hinf": self.hinf,
            "hinf_bound": self.hinf_bound,
            "energy_gramian": self.energy_gramian,
        }


def reconstruct_q(l1: np.ndarray, l2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Lyapunov matrix Q and its inverse from the L1, L2 partition."""
    l1_inv = np.linalg.inv(l1)
    w = l1_inv - np.linalg.inv(l2)
    cond = float(np.linalg.cond(w))
    if not np.isfinite(cond) or cond > 1e14:
        raise ReconstructionError(f"off-diagonal block L1^-1 - L2^-1 is singular (condition {cond:.3e})")
    q = np.block([[l1_inv, w], [w, w]])
    corner = l2 @ np.linalg.solve(l2 - l1, l2)
    q_inv = np.block([[l2, -l2], [-l2, corner]])
    return symmetrize(q), symmetrize(q_inv)


def congruence_matrix(l1: np.ndarray, l2: np.ndarray, m: int) -> np.ndarray:
    n = l1.shape[0]
    t = np.block([[l2, l1], [-l2, np.zeros((n, n))]])
    return scipy.linalg.block_diag(t, np.eye(1), np.eye(m))


def bounded_real_matrix(q: np.ndarray, a_od: np.ndarray, b_od: np.ndarray, c_od: np.ndarray, j: float) -> np.ndarray:
    m = c_od.shape[0]
    qa = q @ a_od
    return np.block([
        [qa + qa.T, q @ b_od, c_od.T],
        [(q @ b_od).T, -np.eye(1), np.zeros((1, m))],
        [c_od, np.zeros((m, 1)), -j * np.eye(m)],
    ])


def _verify_vertex(vertex: Vertex, fvc: FvController, cert: SynthesisCertificate, q: np.ndarray, t_tilde: np.ndarray, grid_hz, hinf_tol: float):
    model = vertex.model
    overall = assemble_overall(model, fvc)
    c_n = bounded_real_matrix(q, overall.a_od, overall.b_od, overall.c_od, cert.j_opt)
    c_n_max = float(np.max(np.linalg.eigvalsh(symmetrize(c_n))))
    c1 = ConstraintBlock("C1", "bounded_real", "nsd", _c1_builder(model.a, model.b_dg, model.b_nr, model.c_dg)).evaluate(cert.values())
    rotated = t_tilde.T @ c_n @ t_tilde
    congruence = float(np.max(np.abs(rotated - c1)) / max(np.max(np.abs(c1)), 1e-300))
    system = overall.system()
    if is_hurwitz(system.a):
        norm = hinf_norm(system, tol=hinf_tol, grid_hz=grid_hz)
    else:
        norm = float("inf")
    return vertex.signature, c_n_max, float(np.max(np.abs(c_n))), congruence, norm


def verify_certificate(
    vertices: Sequence[Vertex],
    fvc: FvController,
    cert: SynthesisCertificate,
    grid_hz: Optional[Sequence[float]] = None,
    hinf_tol: float = 1e-6,
    threads: int = 1,
) -> VerificationReport:
    report = VerificationReport(hinf_bound=cert.hinf_bound if cert.optimal else float("nan"))
    if not cert.optimal:
        report.add("status", False, float("nan"), f"solver status '{cert.status}'")
        return report

    n, m = cert.l1.shape[0], cert.l5.shape[0]
    tol = max(cert.feas_tol, 1e-9)

    # Lyapunov matrix
    q, q_inv = reconstruct_q(cert.l1, cert.l2)
    report.q_min_eig = float(np.linalg.eigvalsh(q)[0])
    report.qqinv_residual = float(np.max(np.abs(q @ q_inv - np.eye(2 * n))))
    report.add("q_positive", report.q_min_eig > 0, report.q_min_eig)
    report.add("q_inverse", report.qqinv_residual < 1e-8, 1e-8 - report.qqinv_residual)
    t = np.block([[cert.l2, cert.l1], [-cert.l2, np.zeros((n, n))]])
    c2 = _c2(NUMPY_OPS, cert.values())
    c2_residual = float(np.max(np.abs(t.T @ q @ t - c2)) / max(np.max(np.abs(c2)), 1e-300))
    report.add("c2_congruence", c2_residual < 1e-6, 1e-6 - c2_residual)

    # bounded-real matrix, congruence and norms per vertex
    t_tilde = congruence_matrix(cert.l1, cert.l2, m)

    def run(vertex):
        return _verify_vertex(vertex, fvc, cert, q, t_tilde, grid_hz, hinf_tol)

    if threads > 1 and len(vertices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, vertices))
    else:
        results = [run(v) for v in vertices]

    limit = cert.hinf_bound * (1.0 + SOUNDNESS_SLACK)
    for signature, c_n_max, c_n_scale, congruence, norm in results:
        report.c_n_max_eig[signature] = c_n_max
        report.congruence_residual[signature] = congruence
        report.hinf[signature] = norm
        cn_tol = tol * max(1.0, c_n_scale)
        report.add(f"c_n[{signature}]", c_n_max < cn_tol, cn_tol - c_n_max)
        report.add(f"congruence[{signature}]", congruence < 1e-6, 1e-6 - congruence)
        report.add(f"stable[{signature}]", math.isfinite(norm), 0.0 if math.isfinite(norm) else -1.0)
        report.add(f"hinf[{signature}]", norm <= limit, limit - norm, f"sweep {norm:.6g} vs bound {cert.hinf_bound:.6g}")

    # energy bound
    diff = symmetrize(cert.l2 - cert.l1)
    diff_min = float(np.linalg.eigvalsh(diff)[0])
    marginal = diff_min <= tol * max(1.0, float(np.max(np.abs(diff))))
    if cert.energy_bound:
        try:
            schur = symmetrize(cert.u - cert.l5 @ np.linalg.solve(diff, cert.l5.T))
            schur_min = float(np.linalg.eigvalsh(schur)[0]) if m else 0.0
        except np.linalg.LinAlgError:
            schur_min = float("nan")
        trace_margin = cert.gamma - float(np.trace(cert.u))
        report.add("energy_schur", bool(schur_min > 0) or marginal, schur_min, marginal=marginal)
        report.add("energy_trace", trace_margin > 0, trace_margin)

    if is_hurwitz(fvc.a_ff):
        gram = controllability_gramian(fvc.a_ff, fvc.b_ff)
        report.energy_gramian = float(np.trace(fvc.c_ff @ gram @ fvc.c_ff.T))
        detail = f"feedforward impulse energy {report.energy_gramian:.6g} vs gamma {cert.gamma:.6g}"
        report.checks.append(CheckResult("energy_gramian", "info", cert.gamma - report.energy_gramian, detail))

    failed = [c.name for c in report.checks if c.status == "fail"]
    if failed:
        logger.warning("certificate verification failed: %s", ", ".join(failed))
    else:
        logger.info("certificate verified over %d vertices", len(vertices))
    return report


# ============================================================================
# Pipeline
# ============================================================================

@dataclass
class SynthesisResult:
    vertices: List[Vertex]
    program: LmiProgram
    certificate: SynthesisCertificate
    controller: FvController
    verification: Optional[VerificationReport] = None


def synthesize(
    builder,
    uncertainty: UncertaintySpec,
    settings: Optional[SynthesisSettings] = None,
    threads: int = 1,
    verify: bool = True,
    grid_hz: Optional[Sequence[float]] = None,
) -> SynthesisResult:
    """Polytope, program, solve, recovery and (optionally) verification for one event."""
    settings = settings or SynthesisSettings()
    vertices = enumerate_polytope(builder, uncertainty, threads=threads)
    if settings.delay_s > 0:
        vertices = [Vertex(v.signature, v.scales, delay_augmented(v.model, settings.delay_s)) for v in vertices]
        logger.info("designing for a %.3g s communication delay (%d states)", settings.delay_s, vertices[0].model.n)
    program = assemble_program(
        vertices,
        settings.gamma,
        eps_rel=settings.eps_rel,
        energy_bound=settings.energy_bound,
        equilibrate=settings.equilibrate,
    )
    program.metadata["delay_s"] = settings.delay_s
    cert = solve_lmi(program, settings)
    fvc = recover_controller(cert, settings.recovery_cond_limit, settings.check_stability)
    report = verify_certificate(vertices, fvc, cert, grid_hz=grid_hz, threads=threads) if verify else None
    return SynthesisResult(vertices, program, cert, fvc, report)
