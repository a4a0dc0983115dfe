#!/usr/bin/env python3
"""
03_consolidate.py: Consolidação dos resultados do pipeline fvc-toolkit.

Gera 4 CSVs principais:
  1. consolidated_runs.csv    : métricas de cabeçalho por cenário e execução
  2. consolidated_events.csv  : métricas por evento de chaveamento
  3. consolidated_ratios.csv  : razão proposta(T_d) / somente realimentação
  4. consolidated_norms.csv   : normas H-inf e H2 por evento e sistema

Uso:
  python scripts/03_consolidate.py \
    --results results \
    --output-dir results/consolidated
"""

import argparse
import glob
import json
import os
import re
import sys

import pandas as pd

METRICS = ("dv_rms_avg", "dv_pk_max", "dt_set_max")
BASELINE = "feedback-only"
RUN_PATTERN = re.compile(r"^proposed_td(?P<delay>[0-9.eE+-]+)$")


def parse_args():
    p = argparse.ArgumentParser(description="Consolida resultados do pipeline")
    p.add_argument("--results", required=True, help="Diretório base dos resultados (ex: results)")
    p.add_argument("--output-dir", required=True, help="Diretório de saída para CSVs consolidados")
    return p.parse_args()


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def describe_run(run):
    """(estratégia, atraso) a partir do nome do diretório da execução."""
    if run == BASELINE:
        return BASELINE, float("nan")
    match = RUN_PATTERN.match(run)
    if match:
        return "proposed", float(match.group("delay"))
    return run, float("nan")


# ============================================================
# SIMULAÇÕES
# ============================================================

def consolidate_runs(results):
    run_rows = []
    event_rows = []
    for path in sorted(glob.glob(os.path.join(results, "*", "simulate", "*", "metrics.json"))):
        run_dir = os.path.dirname(path)
        run = os.path.basename(run_dir)
        scenario = os.path.basename(os.path.dirname(os.path.dirname(run_dir)))
        strategy, delay = describe_run(run)
        metrics = read_json(path)

        row = {"scenario": scenario, "run": run, "strategy": strategy, "delay_s": delay}
        row.update({m: metrics.get(m) for m in METRICS})
        report_path = os.path.join(run_dir, "run_report.json")
        if os.path.exists(report_path):
            report = read_json(report_path)
            row["wall_time_s"] = report.get("wall_time_s")
            row["fallbacks"] = sum(1 for ev in report.get("events", []) if ev.get("fallback"))
        run_rows.append(row)

        for event_id, values in metrics.get("per_event", {}).items():
            event_rows.append({
                "scenario": scenario,
                "run": run,
                "strategy": strategy,
                "delay_s": delay,
                "event_id": event_id,
                "t_event": values.get("t_event"),
                **{m: values.get(m) for m in METRICS},
            })
    return pd.DataFrame(run_rows), pd.DataFrame(event_rows)


def ratio_table(runs):
    """Razões por métrica contra a execução somente realimentação do mesmo cenário."""
    if runs.empty:
        return pd.DataFrame()
    rows = []
    for scenario, group in runs.groupby("scenario"):
        base = group[group["run"] == BASELINE]
        if base.empty:
            print(f"  [AVISO] {scenario}: sem execução {BASELINE}, razões omitidas")
            continue
        base = base.iloc[0]
        for _, run in group[group["strategy"] == "proposed"].iterrows():
            row = {"scenario": scenario, "delay_s": run["delay_s"]}
            for m in METRICS:
                denominator = base[m]
                row[f"{m}_ratio"] = run[m] / denominator if denominator else float("nan")
            rows.append(row)
    return pd.DataFrame(rows).sort_values(["scenario", "delay_s"]).reset_index(drop=True) if rows else pd.DataFrame()


# ============================================================
# ANÁLISE EM FREQUÊNCIA
# ============================================================

def consolidate_norms(results):
    rows = []
    for path in sorted(glob.glob(os.path.join(results, "*", "analyze", "*", "norms.json"))):
        event_dir = os.path.dirname(path)
        scenario = os.path.basename(os.path.dirname(os.path.dirname(event_dir)))
        norms = read_json(path)
        for system, values in norms.get("systems", {}).items():
            rows.append({
                "scenario": scenario,
                "event_id": os.path.basename(event_dir),
                "system": system,
                "hinf": values.get("hinf"),
                "h2": values.get("h2"),
                "max_real_eig": values.get("max_real_eig"),
            })
    return pd.DataFrame(rows)


def main():
    args = parse_args()
    results = os.path.expanduser(args.results)
    out = os.path.expanduser(args.output_dir)
    if not os.path.isdir(results):
        print(f"[ERRO] Diretório não encontrado: {results}")
        sys.exit(1)
    os.makedirs(out, exist_ok=True)

    print("=" * 60)
    print("CONSOLIDAÇÃO")
    print("=" * 60)

    runs, events = consolidate_runs(results)
    ratios = ratio_table(runs)
    norms = consolidate_norms(results)

    for name, frame in (
        ("consolidated_runs.csv", runs),
        ("consolidated_events.csv", events),
        ("consolidated_ratios.csv", ratios),
        ("consolidated_norms.csv", norms),
    ):
        frame.to_csv(os.path.join(out, name), index=False)
        print(f"  {name}: {len(frame)} linhas")

    if not ratios.empty:
        print("\nRazões proposta / somente realimentação:")
        print(ratios.to_string(index=False, float_format=lambda v: f"{v:.3f}"))


if __name__ == "__main__":
    main()
