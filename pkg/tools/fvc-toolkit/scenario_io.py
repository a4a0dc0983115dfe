"""Scenario files in, result files out.

Scenarios are JSON documents validated against docs/scenario.schema.json.
Structured results are JSON (indent 2, sorted keys), series are CSV; matrices
are written row-major with explicit dimensions.
"""

import dataclasses
import json
import logging
import math
import os
from functools import lru_cache
from typing import Dict, Iterable, Mapping, Optional, Union

import numpy as np
import pandas as pd
from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match

from components import IgParams, SgParams, ZipLoad
from configuration import TOOL_VERSION
from errors import ConfigurationError, IoError, ParameterError, ParseError, ValidationError
from fvc_synth import UncertaintySpec
from netmodel import Bus, IgUnit, Line, NetworkDescription, SgUnit, Switch
from profiles import profiles_from_dict
from simulator import Metrics, Scenario, SwitchEvent
from utils import matrix_to_json, sha256_bytes, sha256_file

logger = logging.getLogger(__name__)

SCHEMA_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "..", "docs", "scenario.schema.json")

TOP_LEVEL_DEFAULTS = {
    "name": "scenario",
    "description": "",
    "strategy": "proposed",
    "delay_s": 0.0,
    "dt_s": 1e-3,
    "horizon_s": 10.0,
    "seed": 0,
}

MANIFEST = "manifest.json"
RUN_REPORT = "run_report.json"
# timing-bearing files stay out of the manifest so it is reproducible
UNLISTED = (MANIFEST, RUN_REPORT, "run.log")


@lru_cache(maxsize=1)
def load_schema() -> dict:
    try:
        with open(SCHEMA_PATH, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise IoError(f"cannot read scenario schema: {exc}", SCHEMA_PATH)


# ============================================================================
# Parsing
# ============================================================================

def _read_source(source: Union[str, bytes, os.PathLike]) -> bytes:
    if isinstance(source, bytes):
        return source
    try:
        with open(source, "rb") as f:
            return f.read()
    except OSError as exc:
        raise IoError(str(exc.strerror or exc), str(source))


def _pointer(path: Iterable) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path) if path else ""


def _network(doc: dict) -> NetworkDescription:
    buses = tuple(Bus(b["id"], float(b["kv"])) for b in doc["buses"])
    lines = tuple(
        Line(l["id"], l["from"], l["to"], float(l["r"]), float(l["x"]), float(l.get("b", 0.0)))
        for l in doc["lines"]
    )
    switches = tuple(
        Switch(s["id"], s["kind"], s["from"], s["to"], bool(s["closed"]), float(s.get("r", 0.0)), float(s.get("x", 0.01)))
        for s in doc["switches"]
    )
    sg = tuple(
        SgUnit(u["id"], u["bus"], SgParams(**{k: float(v) for k, v in u["params"].items()}), float(u["p_mw"]), float(u.get("v_set", 1.0)))
        for u in doc["sg_units"]
    )
    ig = []
    for u in doc["ig_units"]:
        params = dict(u["params"])
        decoupling = bool(params.pop("decoupling", True))
        ig.append(IgUnit(u["id"], u["bus"], IgParams(**{k: float(v) for k, v in params.items()}, decoupling=decoupling), float(u["p_mw"]), float(u.get("v_set", 1.0))))
    loads = tuple(
        ZipLoad(
            ld["id"],
            ld["bus"],
            float(ld["p_mw"]),
            float(ld["q_mvar"]),
            tuple(float(w) for w in ld.get("zip", {}).get("p", (1.0, 0.0, 0.0))),
            tuple(float(w) for w in ld.get("zip", {}).get("q", (1.0, 0.0, 0.0))),
        )
        for ld in doc["loads"]
    )
    network = NetworkDescription(
        buses=buses,
        lines=lines,
        switches=switches,
        sg_units=sg,
        ig_units=tuple(ig),
        loads=loads,
        slack=doc["slack"],
        base_mva=float(doc.get("base_mva", 1.0)),
        freq_hz=float(doc.get("freq_hz", 60.0)),
    )
    for unit in network.units():
        unit.params.validate()
    return network


def scenario_from_dict(doc: dict, digest: str = "") -> Scenario:
    errors = list(Draft202012Validator(load_schema()).iter_errors(doc))
    if errors:
        error = best_match(errors)
        raise ParseError(error.message, _pointer(error.absolute_path))

    defaults = tuple(sorted(k for k in TOP_LEVEL_DEFAULTS if k not in doc))
    values = {**TOP_LEVEL_DEFAULTS, **{k: doc[k] for k in TOP_LEVEL_DEFAULTS if k in doc}}
    try:
        network = _network(doc["network"])
        events = [
            SwitchEvent(
                time=float(ev["time"]),
                switch=ev["switch"],
                action=ev["action"],
                uncertainty=UncertaintySpec.from_mapping(ev["uncertainty"]) if "uncertainty" in ev else None,
                gamma=float(ev["gamma"]) if "gamma" in ev else None,
            )
            for ev in doc["events"]
        ]
        profiles = profiles_from_dict(doc["profiles"], seed=int(values["seed"]), dt=float(values["dt_s"])) if "profiles" in doc else None
        scenario = Scenario(
            network=network,
            events=events,
            name=values["name"],
            description=values["description"],
            strategy=values["strategy"],
            delay_s=float(values["delay_s"]),
            dt_s=float(values["dt_s"]),
            horizon_s=float(values["horizon_s"]),
            uncertainty=UncertaintySpec.from_mapping(doc.get("uncertainty")),
            gamma=float(doc["gamma"]) if "gamma" in doc else None,
            profiles=profiles,
            seed=int(values["seed"]),
            version=doc["version"],
            digest=digest,
            defaults=defaults,
        )
    except (ConfigurationError, ParameterError) as exc:
        raise ValidationError(str(exc)) from exc
    scenario.validate()
    if defaults:
        logger.debug("scenario defaults applied: %s", ", ".join(defaults))
    return scenario


def parse_scenario(source: Union[str, bytes, os.PathLike]) -> Scenario:
    """Read and fully validate a scenario (path or raw bytes)."""
    raw = _read_source(source)
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"not a JSON document: {exc}")
    scenario = scenario_from_dict(doc, digest=sha256_bytes(raw))
    logger.info("scenario '%s': %d buses, %d events", scenario.name, len(scenario.network.buses), len(scenario.events))
    return scenario


def scenario_to_dict(scenario: Scenario) -> dict:
    """Serializable form; parsing it back yields the same structure."""
    net = scenario.network
    sg_keys = [f.name for f in dataclasses.fields(SgParams)]
    ig_keys = [f.name for f in dataclasses.fields(IgParams)]
    doc = {
        "version": scenario.version,
        "name": scenario.name,
        "description": scenario.description,
        "network": {
            "base_mva": net.base_mva,
            "freq_hz": net.freq_hz,
            "slack": net.slack,
            "buses": [{"id": b.id, "kv": b.kv} for b in net.buses],
            "lines": [{"id": l.id, "from": l.from_bus, "to": l.to_bus, "r": l.r, "x": l.x, "b": l.b} for l in net.lines],
            "switches": [
                {"id": s.id, "kind": s.kind, "from": s.from_bus, "to": s.to_bus, "r": s.r, "x": s.x, "closed": s.closed}
                for s in net.switches
            ],
            "sg_units": [
                {"id": u.id, "bus": u.bus, "p_mw": u.p_mw, "v_set": u.v_set, "params": {k: getattr(u.params, k) for k in sg_keys}}
                for u in net.sg_units
            ],
            "ig_units": [
                {"id": u.id, "bus": u.bus, "p_mw": u.p_mw, "v_set": u.v_set, "params": {k: getattr(u.params, k) for k in ig_keys}}
                for u in net.ig_units
            ],
            "loads": [
                {"id": ld.id, "bus": ld.bus, "p_mw": ld.p_mw, "q_mvar": ld.q_mvar, "zip": {"p": list(ld.p_weights), "q": list(ld.q_weights)}}
                for ld in net.loads
            ],
        },
        "events": [],
        "strategy": scenario.strategy,
        "delay_s": scenario.delay_s,
        "dt_s": scenario.dt_s,
        "horizon_s": scenario.horizon_s,
        "uncertainty": scenario.uncertainty.to_dict(),
        "seed": scenario.seed,
    }
    for ev in scenario.events:
        item = {"time": ev.time, "switch": ev.switch, "action": ev.action}
        if ev.uncertainty is not None:
            item["uncertainty"] = ev.uncertainty.to_dict()
        if ev.gamma is not None:
            item["gamma"] = ev.gamma
        doc["events"].append(item)
    if scenario.gamma is not None:
        doc["gamma"] = scenario.gamma
    if scenario.profiles is not None:
        doc["profiles"] = scenario.profiles.to_dict()
    return doc


# ============================================================================
# Writing
# ============================================================================

def _clean(value):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats to null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_json(path: str, data) -> str:
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(_clean(data), f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise IoError(str(exc.strerror or exc), path)
    return path


def read_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise IoError(str(exc.strerror or exc), path)
    except json.JSONDecodeError as exc:
        raise ParseError(f"not a JSON document: {exc}")


def write_trace(path: str, frame: pd.DataFrame) -> str:
    try:
        frame.to_csv(path, index=False)
    except OSError as exc:
        raise IoError(str(exc.strerror or exc), path)
    return path


def read_trace(path: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, float_precision="round_trip", dtype={"event": str})
    except OSError as exc:
        raise IoError(str(exc.strerror or exc), path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as exc:
        raise ParseError(f"unreadable trace: {exc}")
    if "time_s" not in frame.columns:
        raise ParseError("trace has no time_s column")
    if "event" not in frame.columns:
        frame["event"] = ""
    frame["event"] = frame["event"].fillna("").astype(str)
    return frame


def write_metrics(path: str, metrics: Metrics) -> str:
    return write_json(path, metrics.to_dict())


def read_metrics(path: str) -> Metrics:
    return Metrics.from_dict(read_json(path))


def svp_frame(response) -> pd.DataFrame:
    columns = {"freq_hz": response.freq_hz}
    for k in range(response.sigma.shape[1]):
        columns[f"sigma_{k + 1}"] = response.sigma[:, k]
    return pd.DataFrame(columns)


def eig_frame(values: np.ndarray) -> pd.DataFrame:
    values = np.asarray(values, dtype=complex)
    return pd.DataFrame({"real": values.real, "imag": values.imag})


def model_report(model) -> dict:
    return {
        "n": model.n,
        "m": model.m,
        "state_labels": list(model.state_labels),
        "output_labels": list(model.output_labels),
        "bus_order": list(model.bus_order),
        "a_dn": matrix_to_json(model.a),
        "b_dg": matrix_to_json(model.b_dg),
        "b_nr": matrix_to_json(model.b_nr),
        "c_dg": matrix_to_json(model.c_dg),
    }


def build_manifest(out_dir: str) -> dict:
    files = []
    for root, _, names in os.walk(out_dir):
        for name in sorted(names):
            if name in UNLISTED:
                continue
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir).replace(os.sep, "/")
            files.append({"path": rel, "sha256": sha256_file(path), "bytes": os.path.getsize(path)})
    files.sort(key=lambda item: item["path"])
    return {"tool_version": TOOL_VERSION, "files": files}


def write_outputs(
    out_dir: str,
    trace: Optional[pd.DataFrame] = None,
    metrics: Optional[Metrics] = None,
    certificates: Optional[Mapping[str, dict]] = None,
    svp: Optional[Mapping[str, object]] = None,
    eig: Optional[Mapping[str, np.ndarray]] = None,
    documents: Optional[Mapping[str, dict]] = None,
) -> dict:
    """Write every given result under deterministic names and refresh manifest.json."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(str(exc.strerror or exc), out_dir)
    if trace is not None:
        write_trace(os.path.join(out_dir, "trace.csv"), trace)
    if metrics is not None:
        write_metrics(os.path.join(out_dir, "metrics.json"), metrics)
    for event_id, cert in (certificates or {}).items():
        write_json(os.path.join(out_dir, f"synth_{event_id}.json"), cert)
    for tag, response in (svp or {}).items():
        write_trace(os.path.join(out_dir, f"svp_{tag}.csv"), svp_frame(response))
    for tag, values in (eig or {}).items():
        write_trace(os.path.join(out_dir, f"eig_{tag}.csv"), eig_frame(values))
    for name, data in (documents or {}).items():
        write_json(os.path.join(out_dir, name), data)
    manifest = build_manifest(out_dir)
    write_json(os.path.join(out_dir, MANIFEST), manifest)
    logger.info("%d result files in %s", len(manifest["files"]), out_dir)
    return manifest


def run_report(scenario: Optional[Scenario], command: str, events: Iterable[dict], wall_time: float, extra: Optional[Dict] = None) -> dict:
    report = {
        "tool_version": TOOL_VERSION,
        "command": command,
        "scenario": scenario.name if scenario else None,
        "input_digest": scenario.digest if scenario else None,
        "events": list(events),
        "wall_time_s": wall_time,
    }
    report.update(extra or {})
    return report
