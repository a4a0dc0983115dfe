"""Affine matrix-inequality programs and their SDP backend.

A program is a catalog of matrix decision variables plus constraint blocks.
Each block is a builder ``build(ops, values) -> matrix`` written once and
evaluated either numerically (``NUMPY_OPS`` with numpy arrays) or symbolically
(``CVXPY_OPS`` with cvxpy variables). Strict inequalities are realized as
``M >= eps I`` or ``M <= -eps I``.
"""

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import cvxpy as cp
import numpy as np

from errors import AssemblyError, SolverError
from utils import symmetrize

logger = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)


class _NumpyOps:
    name = "numpy"

    @staticmethod
    def bmat(blocks):
        return np.block(blocks)

    @staticmethod
    def scalar(value):
        return np.array([[value]], dtype=float)

    @staticmethod
    def trace(mat):
        return np.trace(mat)


class _CvxpyOps:
    name = "cvxpy"

    @staticmethod
    def bmat(blocks):
        return cp.bmat(blocks)

    @staticmethod
    def scalar(value):
        return cp.reshape(value, (1, 1))

    @staticmethod
    def trace(mat):
        return cp.trace(mat)


NUMPY_OPS = _NumpyOps()
CVXPY_OPS = _CvxpyOps()


# ============================================================================
# Variables
# ============================================================================

@dataclass(frozen=True)
class VariableSpec:
    name: str
    shape: tuple
    symmetric: bool = False

    @property
    def size(self) -> int:
        if self.symmetric:
            k = self.shape[0]
            return k * (k + 1) // 2
        return int(np.prod(self.shape)) if self.shape else 1


def svec(mat: np.ndarray) -> np.ndarray:
    """Upper triangle, column by column, off-diagonals scaled by sqrt(2)."""
    k = mat.shape[0]
    rows, cols = np.triu_indices(k)
    order = np.lexsort((rows, cols))
    rows, cols = rows[order], cols[order]
    scale = np.where(rows == cols, 1.0, SQRT2)
    return mat[rows, cols] * scale


def smat(vec: np.ndarray, k: int) -> np.ndarray:
    rows, cols = np.triu_indices(k)
    order = np.lexsort((rows, cols))
    rows, cols = rows[order], cols[order]
    scale = np.where(rows == cols, 1.0, 1.0 / SQRT2)
    out = np.zeros((k, k))
    out[rows, cols] = vec * scale
    out[cols, rows] = vec * scale
    return out


class VariableCatalog:
    def __init__(self):
        self._specs: "OrderedDict[str, VariableSpec]" = OrderedDict()

    def add(self, name: str, shape: tuple, symmetric: bool = False) -> VariableSpec:
        if name in self._specs:
            raise AssemblyError(f"variable '{name}' declared twice", block=name)
        if symmetric and (len(shape) != 2 or shape[0] != shape[1]):
            raise AssemblyError(f"symmetric variable needs a square shape, got {shape}", block=name)
        spec = VariableSpec(name, tuple(shape), symmetric)
        self._specs[name] = spec
        return spec

    def __iter__(self):
        return iter(self._specs.values())

    def __getitem__(self, name: str) -> VariableSpec:
        return self._specs[name]

    @property
    def size(self) -> int:
        return sum(spec.size for spec in self._specs.values())

    def pack(self, values: Dict[str, np.ndarray]) -> np.ndarray:
        parts = []
        for spec in self:
            value = np.asarray(values[spec.name], dtype=float)
            if spec.symmetric:
                parts.append(svec(symmetrize(value)))
            else:
                parts.append(value.reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, vec: np.ndarray) -> Dict[str, np.ndarray]:
        out = {}
        start = 0
        for spec in self:
            chunk = vec[start:start + spec.size]
            start += spec.size
            if spec.symmetric:
                out[spec.name] = smat(chunk, spec.shape[0])
            elif not spec.shape:
                out[spec.name] = float(chunk[0])
            else:
                out[spec.name] = chunk.reshape(spec.shape)
        return out

    def cvxpy_variables(self) -> Dict[str, cp.Variable]:
        out = {}
        for spec in self:
            if spec.symmetric:
                out[spec.name] = cp.Variable(spec.shape, symmetric=True, name=spec.name)
            else:
                out[spec.name] = cp.Variable(spec.shape, name=spec.name)
        return out


# ============================================================================
# Constraint blocks
# ============================================================================

@dataclass
class ConstraintBlock:
    name: str
    family: str
    sense: str                                  # "psd": M >= eps I, "nsd": M <= -eps I
    build: Callable
    margin: float = 0.0
    scaling: Optional[np.ndarray] = None        # diagonal congruence D

    def evaluate(self, values: Dict[str, np.ndarray]) -> np.ndarray:
        return symmetrize(np.atleast_2d(np.asarray(self.build(NUMPY_OPS, values), dtype=float)))

    def slack(self, values: Dict[str, np.ndarray]) -> float:
        """Distance to violation; positive when the strict inequality holds."""
        eig = np.linalg.eigvalsh(self.evaluate(values))
        if self.sense == "psd":
            return float(eig[0] - self.margin)
        return float(-self.margin - eig[-1])


@dataclass
class LmiProgram:
    catalog: VariableCatalog
    blocks: List[ConstraintBlock]
    objective: str
    eps: float
    metadata: dict = field(default_factory=dict)
    maximize: bool = False

    def block(self, name: str) -> ConstraintBlock:
        for blk in self.blocks:
            if blk.name == name:
                return blk
        raise KeyError(name)

    def families(self) -> List[str]:
        return sorted({blk.family for blk in self.blocks})

    def margins(self, values: Dict[str, np.ndarray]) -> Dict[str, float]:
        return {blk.name: blk.slack(values) for blk in self.blocks}

    def without(self, families: Sequence[str]) -> "LmiProgram":
        kept = [blk for blk in self.blocks if blk.family not in families]
        return LmiProgram(self.catalog, kept, self.objective, self.eps, dict(self.metadata), self.maximize)

    def equilibrate(self, reference: Dict[str, np.ndarray], floor: float = 1e-8):
        """Diagonal congruence scaling from the block diagonals at a reference point."""
        for blk in self.blocks:
            diag = np.abs(np.diag(blk.evaluate(reference)))
            top = float(np.max(diag)) if diag.size else 0.0
            if top <= 0:
                blk.scaling = None
                continue
            diag = np.maximum(diag, floor * top)
            blk.scaling = 1.0 / np.sqrt(diag)


# ============================================================================
# Backend
# ============================================================================

@dataclass
class BackendResult:
    status: str                     # optimal | infeasible | numerical-failure
    values: Dict[str, np.ndarray]
    objective: float
    solver: str
    raw_status: str
    iterations: Optional[int]
    solve_time: float


_SOLVER_OPTIONS = {
    "CLARABEL": lambda feas, gap: {"tol_feas": feas, "tol_gap_abs": gap, "tol_gap_rel": gap},
    "SCS": lambda feas, gap: {"eps_abs": feas, "eps_rel": gap, "max_iters": 200000},
    "CVXOPT": lambda feas, gap: {"feastol": feas, "abstol": gap, "reltol": gap},
}


class CvxpyBackend:
    """Solves an LmiProgram: minimize the objective scalar subject to every block."""

    def __init__(self, solver: str = "CLARABEL", fallback: Optional[str] = "SCS", feas_tol: float = 1e-8, gap_tol: float = 1e-8):
        self.solver = solver
        self.fallback = fallback
        self.feas_tol = feas_tol
        self.gap_tol = gap_tol

    def _candidates(self) -> List[str]:
        installed = set(cp.installed_solvers())
        names = [s for s in (self.solver, self.fallback) if s]
        usable = [s for s in dict.fromkeys(names) if s in installed]
        if not usable:
            raise SolverError(f"none of the solvers {names} is installed", diagnostics={"installed": sorted(installed)})
        return usable

    def _problem(self, program: LmiProgram):
        variables = program.catalog.cvxpy_variables()
        constraints = []
        for blk in program.blocks:
            expr = blk.build(CVXPY_OPS, variables)
            expr = 0.5 * (expr + expr.T)
            size = expr.shape[0]
            if blk.scaling is not None:
                d = np.diag(blk.scaling)
                expr = d @ expr @ d
                shift = blk.margin * d @ d
            else:
                shift = blk.margin * np.eye(size)
            if blk.sense == "psd":
                constraints.append(expr - shift >> 0)
            else:
                constraints.append(expr + shift << 0)
        target = variables[program.objective]
        objective = cp.Maximize(target) if program.maximize else cp.Minimize(target)
        return cp.Problem(objective, constraints), variables

    def solve(self, program: LmiProgram, accept_inaccurate: bool = False) -> BackendResult:
        """Tries each candidate solver until one reports an accurate optimum.

        An inaccurate optimum is kept only as a last resort and only when
        ``accept_inaccurate`` is set; otherwise it is a SolverError.
        """
        problem, variables = self._problem(program)
        last_error = None
        inaccurate = None
        for name in self._candidates():
            options = _SOLVER_OPTIONS.get(name, lambda feas, gap: {})(self.feas_tol, self.gap_tol)
            started = time.perf_counter()
            try:
                problem.solve(solver=name, **options)
            except cp.error.SolverError as exc:
                logger.warning("solver %s failed: %s", name, exc)
                last_error = exc
                continue
            elapsed = time.perf_counter() - started
            raw = problem.status
            stats = problem.solver_stats
            iterations = getattr(stats, "num_iters", None) if stats is not None else None
            logger.debug("solver %s finished with status %s in %.2f s", name, raw, elapsed)
            if raw in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
                values = {}
                for spec in program.catalog:
                    value = variables[spec.name].value
                    values[spec.name] = float(value) if not spec.shape else np.asarray(value, dtype=float)
                result = BackendResult("optimal", values, float(problem.value), name, raw, iterations, elapsed)
                if raw == cp.OPTIMAL:
                    return result
                logger.warning("solver %s reports an inaccurate optimum", name)
                inaccurate = inaccurate or result
                last_error = SolverError(
                    f"solver {name} reports an inaccurate optimum",
                    diagnostics={"solver": name, "status": raw, "iterations": iterations},
                )
                continue
            if raw in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
                return BackendResult("infeasible", {}, float("inf"), name, raw, iterations, elapsed)
            last_error = SolverError(
                f"solver {name} returned status '{raw}'",
                diagnostics={"solver": name, "status": raw, "iterations": iterations},
            )
        if inaccurate is not None and accept_inaccurate:
            return inaccurate
        if isinstance(last_error, SolverError):
            raise last_error
        raise SolverError(f"numerical failure: {last_error}", diagnostics={"error": str(last_error)})
