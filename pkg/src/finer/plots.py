"""Static chart rendering for evaluation reports.

Thin layer over matplotlib: the report subcommand calls these to drop PNG
figures next to the CSV curves so results can be eyeballed without
notebooks.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = [
    "plot_accuracy_vs_k",
    "plot_granularity_curve",
    "plot_positional_bias",
    "render_report_figures",
]


def plot_accuracy_vs_k(report: dict, path: str) -> bool:
    by_setting = report.get("by_setting", {})
    series = {
        setting: block.get("by_k", {})
        for setting, block in by_setting.items()
        if block.get("by_k")
    }
    if not series:
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for setting, by_k in sorted(series.items()):
        ks = sorted(int(k) for k in by_k)
        ax.plot(
            ks,
            [by_k[str(k)]["paired_accuracy"] for k in ks],
            marker="o",
            label=setting,
        )
    ax.set_xlabel("entities per question (k)")
    ax.set_ylabel("paired accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True


def plot_granularity_curve(report: dict, path: str) -> bool:
    by_level = report.get("by_granularity_level", {})
    if not by_level:
        return False
    levels = sorted(int(level) for level in by_level)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(
        levels,
        [by_level[str(lv)]["paired_accuracy"] for lv in levels],
        marker="o",
        label="paired",
    )
    for key, label in (("fp_rate", "FP rate"), ("fn_rate", "FN rate")):
        if all(key in by_level[str(lv)] for lv in levels):
            ax.plot(
                levels,
                [by_level[str(lv)][key] for lv in levels],
                marker="s",
                linestyle="--",
                label=label,
            )
    ax.set_xlabel("granularity level")
    ax.set_ylabel("rate")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True


def plot_positional_bias(report: dict, path: str) -> bool:
    by_position = report.get("by_position", {})
    if not by_position:
        return False
    positions = sorted(int(p) for p in by_position)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(
        [str(p) for p in positions],
        [by_position[str(p)]["paired_accuracy"] for p in positions],
        color="#4878A8",
    )
    ax.set_xlabel("negated position")
    ax.set_ylabel("paired accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True


def render_report_figures(report: dict, out_dir: str) -> list[str]:
    """Render every figure the report has data for; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    targets = (
        (plot_accuracy_vs_k, "accuracy_vs_k.png"),
        (plot_granularity_curve, "granularity.png"),
        (plot_positional_bias, "positional_bias.png"),
    )
    for plot_fn, name in targets:
        path = os.path.join(out_dir, name)
        if plot_fn(report, path):
            written.append(path)
    return written
