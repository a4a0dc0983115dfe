#!/usr/bin/env python3
"""
04_plot_results.py: Figuras a partir dos resultados do pipeline.

Gera, por cenário:
  - fig_<cenario>_dv.pdf/png   : desvio de tensão nos terminais dos DGs, proposta x realimentação
  - fig_<cenario>_svp.pdf/png  : valores singulares por evento (G_ol, G e G com atraso)
  - fig_ratios.pdf/png         : razões das métricas contra o atraso (de consolidated_ratios.csv)

Uso:
  python scripts/04_plot_results.py --results results --figures results/figures
"""

import argparse
import glob
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

METRIC_LABELS = {
    "dv_rms_avg_ratio": r"$\Delta V_{rms,avg}$",
    "dv_pk_max_ratio": r"$\Delta V_{pk,max}$",
    "dt_set_max_ratio": r"$\Delta T_{set,max}$",
}


def parse_args():
    p = argparse.ArgumentParser(description="Figuras dos resultados do fvc-toolkit")
    p.add_argument("--results", required=True, help="Diretório base dos resultados")
    p.add_argument("--figures", required=True, help="Diretório de saída das figuras")
    p.add_argument("--delay", default="0", help="Atraso (s) da execução proposta a comparar (default: 0)")
    return p.parse_args()


def save(fig, figures, name):
    for ext in ("pdf", "png"):
        fig.savefig(os.path.join(figures, f"{name}.{ext}"), dpi=300, bbox_inches="tight")
    plt.close(fig)
    print(f"  {name}.pdf/png")


def read_trace(path):
    return pd.read_csv(path, float_precision="round_trip", dtype={"event": str})


def plot_traces(scenario_dir, scenario, delay, figures):
    base = os.path.join(scenario_dir, "simulate", "feedback-only", "trace.csv")
    proposed = os.path.join(scenario_dir, "simulate", f"proposed_td{delay}", "trace.csv")
    if not (os.path.exists(base) and os.path.exists(proposed)):
        print(f"  [AVISO] {scenario}: traços incompletos, figura omitida")
        return
    frames = {"somente realimentação": read_trace(base), f"proposta ($T_d$={delay} s)": read_trace(proposed)}
    dg_cols = [c for c in frames["somente realimentação"].columns if c.startswith("dv_")]
    fig, axes = plt.subplots(len(dg_cols), 1, figsize=(10, 2.6 * len(dg_cols)), sharex=True, squeeze=False)
    for ax, col in zip(axes[:, 0], dg_cols):
        for label, frame in frames.items():
            ax.plot(frame["time_s"], frame[col], linewidth=0.9, label=label)
        ax.set_ylabel(f"{col[3:]} $\\Delta V$ (pu)")
        ax.grid(True, alpha=0.3)
    axes[0, 0].legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("tempo (s)")
    fig.tight_layout()
    save(fig, figures, f"fig_{scenario}_dv")


def plot_svp(scenario_dir, scenario, figures):
    events = sorted(glob.glob(os.path.join(scenario_dir, "analyze", "ev*")))
    if not events:
        return
    fig, axes = plt.subplots(len(events), 1, figsize=(8, 2.8 * len(events)), squeeze=False)
    for ax, event_dir in zip(axes[:, 0], events):
        for path in sorted(glob.glob(os.path.join(event_dir, "svp_G*.csv"))):
            tag = os.path.basename(path)[4:-4]
            if tag == "G_ff":
                continue
            frame = pd.read_csv(path)
            ax.loglog(frame["freq_hz"], frame["sigma_1"], linewidth=0.9, label=tag)
        ax.set_title(os.path.basename(event_dir), fontsize=9)
        ax.set_ylabel(r"$\bar\sigma$")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=7)
    axes[-1, 0].set_xlabel("frequência (Hz)")
    fig.tight_layout()
    save(fig, figures, f"fig_{scenario}_svp")


def plot_ratios(results, figures):
    path = os.path.join(results, "consolidated", "consolidated_ratios.csv")
    if not os.path.exists(path):
        print("  [AVISO] consolidated_ratios.csv ausente; rode 03_consolidate.py antes")
        return
    ratios = pd.read_csv(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for scenario, group in ratios.groupby("scenario"):
        for col, label in METRIC_LABELS.items():
            ax.plot(group["delay_s"], group[col], marker="o", label=f"{scenario} {label}")
    ax.axhline(1.0, color="black", linewidth=0.8, linestyle="--")
    ax.set_xlabel("atraso de comunicação $T_d$ (s)")
    ax.set_ylabel("proposta / somente realimentação")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    save(fig, figures, "fig_ratios")


def main():
    args = parse_args()
    os.makedirs(args.figures, exist_ok=True)
    print("=" * 60)
    print("FIGURAS")
    print("=" * 60)
    for scenario_dir in sorted(glob.glob(os.path.join(args.results, "*"))):
        if not os.path.isdir(os.path.join(scenario_dir, "simulate")) and not os.path.isdir(os.path.join(scenario_dir, "analyze")):
            continue
        scenario = os.path.basename(scenario_dir)
        plot_traces(scenario_dir, scenario, args.delay, args.figures)
        plot_svp(scenario_dir, scenario, args.figures)
    plot_ratios(args.results, args.figures)


if __name__ == "__main__":
    main()
