import os
import argparse
from typing import Optional, Sequence

import numpy as np

from errors import ParameterError

TOOL_VERSION = "1.0.0"

OUTPUT_ENV_VAR = "FVC_TOOLKIT_OUTPUT"

STRATEGIES = ("proposed", "feedback-only")
FAILURE_POLICIES = ("abort", "fallback")


class SynthesisSettings:
    def __init__(
        self,
        gamma: float = 10.0,
        eps_rel: float = 1e-7,
        energy_bound: bool = True,
        solver: str = "CLARABEL",
        fallback_solver: Optional[str] = "SCS",
        feas_tol: float = 1e-8,
        gap_tol: float = 1e-8,
        equilibrate: bool = True,
        recovery_cond_limit: float = 1e12,
        check_stability: bool = True,
        backoff: float = 1e-3,
        condition: bool = True,
        delay_s: float = 0.0,
        compensate_delay: bool = True,
    ):
        if gamma < 0:
            raise ParameterError(f"gamma must be >= 0, got {gamma}")
        if eps_rel <= 0:
            raise ParameterError(f"strictness margin must be > 0, got {eps_rel}")
        if backoff <= 0:
            raise ParameterError(f"backoff must be > 0, got {backoff}")
        if delay_s < 0:
            raise ParameterError(f"design delay must be >= 0, got {delay_s}")
        self.gamma = float(gamma)
        self.eps_rel = float(eps_rel)
        self.energy_bound = energy_bound
        self.solver = solver
        self.fallback_solver = fallback_solver
        self.feas_tol = float(feas_tol)
        self.gap_tol = float(gap_tol)
        self.equilibrate = equilibrate
        self.recovery_cond_limit = float(recovery_cond_limit)
        self.check_stability = check_stability
        # relative slack on J given up to condition L2 - L1
        self.backoff = float(backoff)
        self.condition = condition
        # communication delay the controller is designed for
        self.delay_s = float(delay_s)
        self.compensate_delay = compensate_delay

    def with_gamma(self, gamma: Optional[float]) -> "SynthesisSettings":
        if gamma is None:
            return self
        clone = SynthesisSettings(**vars(self))
        clone.gamma = float(gamma)
        if clone.gamma < 0:
            raise ParameterError(f"gamma must be >= 0, got {gamma}")
        return clone

    def with_delay(self, delay_s: float) -> "SynthesisSettings":
        """Copy designed for ``delay_s``; unchanged when compensation is off."""
        if not self.compensate_delay or float(delay_s) == self.delay_s:
            return self
        clone = SynthesisSettings(**vars(self))
        clone.delay_s = float(delay_s)
        if clone.delay_s < 0:
            raise ParameterError(f"design delay must be >= 0, got {delay_s}")
        return clone


class AnalysisSettings:
    def __init__(
        self,
        f_min_hz: float = 1e-4,
        f_max_hz: float = 1e5,
        points: int = 400,
        hinf_tol: float = 1e-6,
        refine_peaks: int = 5,
        delays: Sequence[float] = (0.1, 0.2, 0.4, 0.6),
    ):
        if not 0 < f_min_hz < f_max_hz:
            raise ParameterError(f"invalid frequency range [{f_min_hz}, {f_max_hz}] Hz")
        if points < 2:
            raise ParameterError("frequency grid needs at least 2 points")
        if any(d < 0 for d in delays):
            raise ParameterError(f"delays must be >= 0, got {list(delays)}")
        self.f_min_hz = float(f_min_hz)
        self.f_max_hz = float(f_max_hz)
        self.points = int(points)
        self.hinf_tol = float(hinf_tol)
        self.refine_peaks = int(refine_peaks)
        self.delays = [float(d) for d in delays]

    def grid_hz(self) -> np.ndarray:
        return np.logspace(np.log10(self.f_min_hz), np.log10(self.f_max_hz), self.points)


class SimulationSettings:
    def __init__(
        self,
        dt: float = 1e-3,
        horizon: float = 10.0,
        settle_threshold: float = 1e-6,
        on_failure: str = "abort",
        threads: int = 1,
    ):
        if dt <= 0:
            raise ParameterError(f"dt must be > 0, got {dt}")
        if horizon < 10 * dt:
            raise ParameterError(f"horizon {horizon} s shorter than 10 steps of {dt} s")
        if on_failure not in FAILURE_POLICIES:
            raise ParameterError(f"unknown failure policy '{on_failure}'")
        self.dt = float(dt)
        self.horizon = float(horizon)
        self.settle_threshold = float(settle_threshold)
        self.on_failure = on_failure
        self.threads = max(1, int(threads))


class SettleBand:
    def __init__(self, rel: float = 0.02, floor: float = 1e-4, min_window: float = 0.0):
        if rel < 0 or floor < 0:
            raise ParameterError("settle band fractions must be >= 0")
        self.rel = float(rel)
        self.floor = float(floor)
        self.min_window = float(min_window)

    def width(self, peak_to_peak: float) -> float:
        return max(self.rel * peak_to_peak, self.floor)


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV_VAR, os.path.join(".", "results"))


def pick(flag_value, file_value, default):
    """Resolve a setting: CLI flag > scenario file value > built-in default."""
    if flag_value is not None:
        return flag_value
    if file_value is not None:
        return file_value
    return default


# ============================================================================
# Argument parsing
# ============================================================================

def parse_uncertainty(text: str) -> dict:
    """Parse 'ka=0.3,lf=0.3,sr=0' into a fraction map."""
    result = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        key, sep, value = item.partition("=")
        key = key.strip().lower()
        if not sep or key not in ("ka", "lf", "sr"):
            raise argparse.ArgumentTypeError(f"expected ka=,lf=,sr= entries, got '{item}'")
        try:
            fraction = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"'{value}' is not a number")
        if not 0 <= fraction < 1:
            raise argparse.ArgumentTypeError(f"{key} fraction must be in [0, 1), got {fraction}")
        result[key] = fraction
    return result


def parse_float_list(text: str) -> list:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    if any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("delays must be >= 0")
    return values


def _add_common_args(parser: argparse.ArgumentParser):
    parser.add_argument(
        "-o",
        "--output-dir",
        dest="output_dir",
        help=f"directory for result files (default: ${OUTPUT_ENV_VAR} or ./results)",
        default=None,
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", help="debug logging", action="store_true")
    verbosity.add_argument("-q", "--quiet", help="warnings and errors only", action="store_true")
    parser.add_argument(
        "--threads",
        help="cap on worker threads for independent evaluations (default: 1)",
        type=int,
        default=None,
    )


def _add_scenario_args(parser: argparse.ArgumentParser):
    parser.add_argument("scenario", help="scenario JSON file (see docs/scenario.schema.json)")
    parser.add_argument(
        "-e",
        "--event",
        help="index of the switch event whose pre/post configurations are used (default: 0)",
        type=int,
        default=0,
    )


def _add_synthesis_args(parser: argparse.ArgumentParser):
    parser.add_argument("--gamma", help="bound on tr(U), energy of the feedforward signal", type=float, default=None)
    parser.add_argument(
        "--uncertainty",
        help="estimation error fractions, e.g. ka=0.3,lf=0.3,sr=0.3 (zero or absent entries are inactive)",
        type=parse_uncertainty,
        default=None,
    )
    parser.add_argument("--eps", help="strictness margin relative to the largest constant entry", type=float, default=None)
    parser.add_argument("--solver", help="SDP solver name known to cvxpy (default: CLARABEL)", default=None)
    parser.add_argument(
        "--no-energy-bound",
        dest="no_energy_bound",
        help="drop the C3/gamma constraint family (ablation)",
        action="store_true",
    )
    parser.add_argument("--backoff", help="relative slack on J traded for a better conditioned controller (default: 1e-3)", type=float, default=None)
    parser.add_argument(
        "--no-delay-compensation",
        dest="no_delay_compensation",
        help="keep the delay-free controller when a communication delay is given",
        action="store_true",
    )


def _add_grid_args(parser: argparse.ArgumentParser):
    parser.add_argument("--fmin", help="lowest grid frequency in Hz (default: 1e-4)", type=float, default=None)
    parser.add_argument("--fmax", help="highest grid frequency in Hz (default: 1e5)", type=float, default=None)
    parser.add_argument("--points", help="log-spaced grid points (default: 400)", type=int, default=None)


def _add_settle_args(parser: argparse.ArgumentParser):
    parser.add_argument("--settle-rel", dest="settle_rel", help="settle band relative to peak-to-peak (default: 0.02)", type=float, default=None)
    parser.add_argument("--settle-floor", dest="settle_floor", help="absolute settle band floor in pu (default: 1e-4)", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fvc-toolkit",
        description="Model, synthesize and simulate feedforward voltage controllers for reconfigurable distribution networks.",
        epilog="Check README file for more information on running this tool.",
    )
    sub = parser.add_subparsers(dest="command", metavar="{model,synth,analyze,simulate,metrics}")
    sub.required = True

    model = sub.add_parser("model", help="assemble the switched state-space model of one event")
    _add_scenario_args(model)
    _add_common_args(model)

    synth = sub.add_parser("synth", help="solve the LMI program and recover the feedforward controller")
    _add_scenario_args(synth)
    _add_synthesis_args(synth)
    synth.add_argument("--delay", dest="design_delay", help="communication delay in s the controller is designed for (default: 0)", type=float, default=None)
    _add_common_args(synth)

    analyze = sub.add_parser("analyze", help="eigenvalues, singular values and norms with and without delay")
    _add_scenario_args(analyze)
    _add_synthesis_args(analyze)
    _add_grid_args(analyze)
    analyze.add_argument("--delay", help="communication delays in s, e.g. 0.1,0.2,0.4,0.6", type=parse_float_list, default=None)
    analyze.add_argument("--hamiltonian", help="cross-check H-infinity norms by Hamiltonian bisection", action="store_true")
    _add_common_args(analyze)

    simulate = sub.add_parser("simulate", help="run the switching scenario end to end")
    simulate.add_argument("scenario", help="scenario JSON file (see docs/scenario.schema.json)")
    simulate.add_argument(
        "--strategy",
        help="proposed, feedback-only or both (default: scenario value)",
        choices=STRATEGIES + ("both",),
        default=None,
    )
    simulate.add_argument("--delay", help="communication delay(s) in s, comma separated", type=parse_float_list, default=None)
    simulate.add_argument("--dt", help="integration step in s (default: 1e-3)", type=float, default=None)
    simulate.add_argument("--horizon", help="settle horizon per event in s (default: 10)", type=float, default=None)
    simulate.add_argument("--on-failure", dest="on_failure", help="synthesis failure policy", choices=FAILURE_POLICIES, default=None)
    simulate.add_argument("--no-profiles", dest="no_profiles", help="ignore load/PV profiles of the scenario", action="store_true")
    _add_synthesis_args(simulate)
    _add_settle_args(simulate)
    _add_common_args(simulate)

    metrics = sub.add_parser("metrics", help="recompute metrics from an existing trace.csv")
    metrics.add_argument("trace", help="trace CSV written by simulate")
    _add_settle_args(metrics)
    _add_common_args(metrics)

    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    return build_parser().parse_args(list(argv))
