"""Command-line entry point: model, synth, analyze, simulate, metrics.

Exit codes: 0 on success, 1 on any computation or input error, 2 on usage
errors. Logs go to stderr and to run.log in the output directory.
"""

import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import List, Sequence

import numpy as np

from configuration import (
    STRATEGIES,
    AnalysisSettings,
    SettleBand,
    SimulationSettings,
    SynthesisSettings,
    default_output_dir,
    parse_args,
    pick,
)
from errors import FvcToolkitError, ParameterError, ValidationError
from fvc_synth import UncertaintySpec, synthesize
from scenario_io import model_report, parse_scenario, read_trace, run_report, write_outputs
from simulator import Scenario, ScenarioRunner, compute_metrics
from ssanalysis import (
    assemble_delayed,
    assemble_overall,
    controller_system,
    eigenvalues,
    frequency_response,
    h2_norm,
    hinf_norm,
    hinf_norm_hamiltonian,
    pade_delay_factor,
    plant_system,
)

logger = logging.getLogger("fvc_toolkit")

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"


def configure_logging(args):
    level = logging.INFO
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    elif getattr(args, "quiet", False):
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATEFMT, stream=sys.stderr, force=True)


def attach_run_log(out_dir: str) -> logging.Handler:
    handler = logging.FileHandler(os.path.join(out_dir, "run.log"), mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT, LOG_DATEFMT))
    logging.getLogger().addHandler(handler)
    return handler


# ============================================================================
# Settings from flags and scenario values
# ============================================================================

def _threads(args) -> int:
    threads = pick(args.threads, None, 1)
    if threads < 1:
        raise ParameterError(f"--threads must be >= 1, got {threads}")
    return threads


def synthesis_settings(args, scenario: Scenario, event_gamma=None) -> SynthesisSettings:
    file_gamma = event_gamma if event_gamma is not None else scenario.gamma
    return SynthesisSettings(
        gamma=pick(args.gamma, file_gamma, 10.0),
        eps_rel=pick(args.eps, None, 1e-7),
        energy_bound=not args.no_energy_bound,
        solver=pick(args.solver, None, "CLARABEL"),
        backoff=pick(args.backoff, None, 1e-3),
        delay_s=pick(getattr(args, "design_delay", None), None, 0.0),
        compensate_delay=not args.no_delay_compensation,
    )


def uncertainty_spec(args, scenario: Scenario, event=None) -> UncertaintySpec:
    if args.uncertainty is not None:
        return UncertaintySpec.from_mapping(args.uncertainty)
    if event is not None and event.uncertainty is not None:
        return event.uncertainty
    return scenario.uncertainty


def analysis_settings(args) -> AnalysisSettings:
    defaults = AnalysisSettings()
    return AnalysisSettings(
        f_min_hz=pick(getattr(args, "fmin", None), None, defaults.f_min_hz),
        f_max_hz=pick(getattr(args, "fmax", None), None, defaults.f_max_hz),
        points=pick(getattr(args, "points", None), None, defaults.points),
        delays=pick(getattr(args, "delay", None), None, defaults.delays),
    )


def settle_band(args) -> SettleBand:
    return SettleBand(rel=pick(args.settle_rel, None, 0.02), floor=pick(args.settle_floor, None, 1e-4))


def _delay_tag(delay: float) -> str:
    return f"{delay:g}"


# ============================================================================
# Subcommands
# ============================================================================

def _event_setup(args):
    scenario = parse_scenario(args.scenario)
    runner = ScenarioRunner(scenario, strategy="feedback-only")
    builder = runner.event_builder(args.event)
    return scenario, scenario.events[args.event], builder


def cmd_model(args, out_dir: str) -> dict:
    scenario, event, builder = _event_setup(args)
    model = builder.build()
    report = model_report(model)
    report.update({
        "event_id": Scenario.event_id(args.event),
        "switch": event.switch,
        "action": event.action,
        "restored_buses": list(builder.restored_buses),
        "shed_buses": list(builder.shed_buses),
    })
    write_outputs(out_dir, eig={"G_ol": eigenvalues(model.a)}, documents={"model.json": report})
    return {"scenario": scenario, "events": [{"event_id": report["event_id"], "n": model.n, "m": model.m}]}


def _synthesize(args, scenario, event, builder, grid_hz=None, delay=None):
    settings = synthesis_settings(args, scenario, event.gamma)
    if delay is not None:
        settings = settings.with_delay(delay)
    spec = uncertainty_spec(args, scenario, event)
    result = synthesize(builder, spec, settings, threads=_threads(args), grid_hz=grid_hz)
    document = {
        "event_id": Scenario.event_id(args.event),
        "uncertainty": spec.to_dict(),
        "certificate": result.certificate.to_dict(),
        "controller": result.controller.to_dict(),
        "verification": result.verification.to_dict(),
    }
    return result, document


def cmd_synth(args, out_dir: str) -> dict:
    scenario, event, builder = _event_setup(args)
    result, document = _synthesize(args, scenario, event, builder)
    write_outputs(out_dir, certificates={document["event_id"]: document})
    if not result.verification.passed:
        failed = [c.name for c in result.verification.checks if c.status == "fail"]
        raise ValidationError(f"certificate verification failed: {', '.join(failed)}")
    return {"scenario": scenario, "events": [document]}


def cmd_analyze(args, out_dir: str) -> dict:
    scenario, event, builder = _event_setup(args)
    settings = analysis_settings(args)
    grid = settings.grid_hz()
    result, document = _synthesize(args, scenario, event, builder, grid_hz=grid, delay=0.0)
    model = builder.build()
    fvc = result.controller
    certificates = {document["event_id"]: document}
    compensate = not args.no_delay_compensation

    systems = {
        "G_ol": plant_system(model),
        "G": assemble_overall(model, fvc).system(),
        "G_ff": controller_system(fvc),
    }
    pade_modulus_error = 0.0
    for delay in settings.delays:
        tag = _delay_tag(delay)
        delayed_fvc = fvc
        if compensate and delay > 0:
            delayed, delayed_doc = _synthesize(args, scenario, event, builder, grid_hz=grid, delay=delay)
            delayed_fvc = delayed.controller
            certificates[f"{document['event_id']}_td{tag}"] = delayed_doc
        systems[f"G_d_{tag}"] = assemble_delayed(model, delayed_fvc, delay).system
        factor = pade_delay_factor(delay)
        modulus = np.abs([factor.evaluate(2j * np.pi * f) for f in grid])
        pade_modulus_error = max(pade_modulus_error, float(np.max(np.abs(modulus - 1.0))))

    svp, eig, norms = {}, {}, {}
    for tag, system in systems.items():
        svp[tag] = frequency_response(system, grid)
        eig[tag] = eigenvalues(system.a)
        entry = {
            "hinf": hinf_norm(system, tol=settings.hinf_tol, grid_hz=grid, refine_peaks=settings.refine_peaks),
            "h2": h2_norm(system),
            "svp_peak": svp[tag].peak,
            "max_real_eig": float(np.max(eig[tag].real)) if eig[tag].size else None,
        }
        if args.hamiltonian:
            entry["hinf_hamiltonian"] = hinf_norm_hamiltonian(system, tol=settings.hinf_tol)
        norms[tag] = entry
        logger.info("%s: H-inf %.6g, H2 %.6g", tag, entry["hinf"], entry["h2"])

    documents = {
        "norms.json": {
            "systems": norms,
            "pade_modulus_error": pade_modulus_error,
            "delays_s": settings.delays,
            "delay_compensation": compensate,
        }
    }
    write_outputs(out_dir, certificates=certificates, svp=svp, eig=eig, documents=documents)
    return {"scenario": scenario, "events": list(certificates.values())}


def _simulate_one(scenario, strategy, delay, args, simulation, band, out_dir):
    started = time.perf_counter()
    synthesis = synthesis_settings(args, scenario)
    if args.uncertainty is not None:
        scenario = dataclasses.replace(scenario, uncertainty=UncertaintySpec.from_mapping(args.uncertainty))
    runner = ScenarioRunner(
        scenario,
        strategy=strategy,
        delay_s=delay,
        synthesis=synthesis,
        simulation=simulation,
        use_profiles=not args.no_profiles,
        event_overrides=args.gamma is None and args.uncertainty is None,
    )
    trace = runner.run()
    metrics = compute_metrics(trace, band)
    reports = [r.to_dict() for r in trace.reports]
    wall = time.perf_counter() - started
    documents = {
        "run_report.json": run_report(
            scenario, "simulate", reports, wall,
            {"strategy": strategy, "delay_s": delay, "metrics": metrics.to_dict()},
        )
    }
    write_outputs(out_dir, trace=trace.frame, metrics=metrics, certificates={r.event_id: r.to_dict(timing=False) for r in trace.reports}, documents=documents)
    logger.info("%s, T_d=%g s: dV_rms,avg=%.4g pu, dV_pk,max=%.4g pu, dT_set,max=%.3f s",
                strategy, delay, metrics.dv_rms_avg, metrics.dv_pk_max, metrics.dt_set_max)
    return reports


def cmd_simulate(args, out_dir: str) -> dict:
    scenario = parse_scenario(args.scenario)
    threads = _threads(args)
    strategy = pick(args.strategy, scenario.strategy, "proposed")
    strategies = list(STRATEGIES) if strategy == "both" else [strategy]
    delays = pick(args.delay, None, [scenario.delay_s])
    simulation = SimulationSettings(
        dt=pick(args.dt, scenario.dt_s, 1e-3),
        horizon=pick(args.horizon, scenario.horizon_s, 10.0),
        on_failure=pick(args.on_failure, None, "abort"),
        threads=1,
    )
    band = settle_band(args)

    # feedback-only does not depend on the delay
    combos = []
    for s in strategies:
        for d in (delays if s == "proposed" else delays[:1]):
            combos.append((s, d))
    single = len(combos) == 1

    def run(combo):
        s, d = combo
        target = out_dir if single else os.path.join(out_dir, s if s == "feedback-only" else f"{s}_td{_delay_tag(d)}")
        return _simulate_one(scenario, s, d, args, simulation, band, target)

    if threads > 1 and not single:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, combos))
    else:
        results = [run(c) for c in combos]
    events = [item for reports in results for item in reports]
    return {"scenario": scenario, "events": events, "runs": [{"strategy": s, "delay_s": d} for s, d in combos]}


def cmd_metrics(args, out_dir: str) -> dict:
    frame = read_trace(args.trace)
    metrics = compute_metrics(frame, settle_band(args))
    write_outputs(out_dir, metrics=metrics)
    headline = {"dv_rms_avg": metrics.dv_rms_avg, "dv_pk_max": metrics.dv_pk_max, "dt_set_max": metrics.dt_set_max}
    print(json.dumps(headline, sort_keys=True))
    return {"scenario": None, "events": []}


COMMANDS = {
    "model": cmd_model,
    "synth": cmd_synth,
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "metrics": cmd_metrics,
}


# ============================================================================
# Dispatch
# ============================================================================

def dispatch(argv: Sequence[str]) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    configure_logging(args)
    out_dir = args.output_dir or default_output_dir()
    handler = None
    started = time.perf_counter()
    try:
        os.makedirs(out_dir, exist_ok=True)
        handler = attach_run_log(out_dir)
        outcome = COMMANDS[args.command](args, out_dir)
        if args.command != "simulate":
            report = run_report(outcome["scenario"], args.command, outcome["events"], time.perf_counter() - started)
            write_outputs(out_dir, documents={"run_report.json": report})
        logger.info("%s finished in %.2f s", args.command, time.perf_counter() - started)
        return 0
    except FvcToolkitError as exc:
        logger.error("%s", exc)
        return 1
    except (np.linalg.LinAlgError, FloatingPointError, OSError) as exc:
        logger.error("numerical or system failure: %s", exc)
        return 1
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


def main(argv: List[str] = None):
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
