"""Figures for experiment sweeps, rendered headless to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRIC_LABELS = {
    "acc_pi6": r"ACC$_{\pi/6}$",
    "acc_pi18": r"ACC$_{\pi/18}$",
    "med_err": "median error (deg)",
}


def _weighted(rows):
    return [r for r in rows if r["category"] == "ALL"]


def _series(rows, x_key):
    """{grid value: (xs, {metric: ys})} ordered as first seen."""
    out = {}
    for r in rows:
        xs, ys = out.setdefault(r["value"], ([], {m: [] for m in METRIC_LABELS}))
        xs.append(r[x_key])
        for m in METRIC_LABELS:
            ys[m].append(r[m])
    return out


def plot_lines(rows, axis: str, x_key: str, path) -> Path:
    """One panel per metric; one line per grid value against ``x_key``."""
    series = _series(_weighted(rows), x_key)
    fig, axes = plt.subplots(1, len(METRIC_LABELS), figsize=(4.2 * len(METRIC_LABELS), 3.4))
    for ax, (metric, label) in zip(axes, METRIC_LABELS.items()):
        for value, (xs, ys) in series.items():
            # categorical x (occlusion levels) is plotted at integer positions
            pos = np.arange(len(xs)) if isinstance(xs[0], str) else np.asarray(xs, dtype=float)
            ax.plot(pos, ys[metric], marker="o", label=f"{axis}={value}")
            if isinstance(xs[0], str):
                ax.set_xticks(pos, xs)
        ax.set_xlabel(x_key.replace("_", " "))
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_bars(rows, axis: str, path) -> Path:
    """Grouped bars: one group per occlusion level, one bar per grid value."""
    rows = _weighted(rows)
    values = list(dict.fromkeys(r["value"] for r in rows))
    groups = list(dict.fromkeys((r["occlusion_level"], r["beta_test"]) for r in rows))
    width = 0.8 / len(values)
    fig, axes = plt.subplots(1, len(METRIC_LABELS), figsize=(4.2 * len(METRIC_LABELS), 3.4))
    for ax, (metric, label) in zip(axes, METRIC_LABELS.items()):
        for k, value in enumerate(values):
            heights = [
                next((r[metric] for r in rows if r["value"] == value and (r["occlusion_level"], r["beta_test"]) == g), np.nan)
                for g in groups
            ]
            ax.bar(np.arange(len(groups)) + k * width, heights, width, label=value)
        ax.set_xticks(np.arange(len(groups)) + 0.4 - width / 2, [f"{lv} b={b:g}" for lv, b in groups])
        ax.set_ylabel(label)
        ax.grid(alpha=0.3, axis="y")
    axes[0].legend(fontsize="small", title=axis, loc="lower left", framealpha=0.9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_experiment(rows, axis: str, path) -> Path:
    """Pick a layout from what varies in the rows besides the grid axis."""
    rows = _weighted(rows)
    levels = {r["occlusion_level"] for r in rows}
    betas = {r["beta_test"] for r in rows}
    if axis == "beta_test" or (len(betas) > 1 and len(levels) == 1):
        if axis == "beta_test":
            rows = [dict(r, value="shared") for r in rows]
        return plot_lines(rows, axis, "beta_test", path)
    if axis in ("s_occ", "beta_train") and len(levels) > 1:
        return plot_lines(rows, axis, "occlusion_level", path)
    return plot_bars(rows, axis, path)


def plot_history(histories: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for label, h in histories.items():
        ax.plot(np.arange(1, len(h) + 1), h, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean mined loss")
    if all(min(h) > 0 for h in histories.values() if len(h)):
        ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
