"""Figure rendering: per-strategy metric curves and round-time violins."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .frames import MetricsFrame, SchemaError, load_metrics

CURVE_METRICS = ("train_loss", "test_acc")

_LABELS = {
    "fedavg": "FedAvg",
    "fedavg_ds": "FedAvg-DS",
    "fedprox": "FedProx",
    "fedcore": "FedCore",
}


def _load_all(csv_paths) -> list[MetricsFrame]:
    frames = [load_metrics(p) for p in csv_paths]
    if not frames:
        raise SchemaError("no input files given")
    return frames


def plot_curves(csv_paths, metric: str, out_image) -> dict[str, np.ndarray]:
    """One labeled curve per strategy over rounds; returns the plotted series."""
    if metric not in CURVE_METRICS:
        raise SchemaError(f"metric must be one of {CURVE_METRICS}, got {metric!r}")
    frames = _load_all(csv_paths)
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted: dict[str, np.ndarray] = {}
    for frame in frames:
        rounds = frame.rounds
        if not rounds:
            raise SchemaError(f"{frame.path}: no rounds to plot")
        values = np.asarray(frame.column(metric), dtype=float)
        label = _LABELS.get(frame.strategy, frame.strategy)
        ax.plot(rounds, values, label=label)
        plotted[frame.strategy] = values
    ax.set_xlabel("round")
    ax.set_ylabel(metric.replace("_", " "))
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_image, dpi=120)
    plt.close(fig)
    return plotted


def plot_roundtime_violin(csv_paths, tau, out_image) -> dict[str, np.ndarray]:
    """Round-length distributions normalized by the deadline, log y-axis.

    Plots max_client_time/tau per round for each strategy, with a horizontal
    line at 1.0 (the deadline). Rounds where no client completed (length 0)
    carry no duration and are dropped. Returns the plotted data per strategy.
    """
    frames = _load_all(csv_paths)
    if tau is None:
        taus = {t for frame in frames for t in frame.column("tau")}
        if len(taus) != 1:
            raise SchemaError(f"inputs disagree on tau ({sorted(taus)}); pass it explicitly")
        tau = taus.pop()
    if not (tau > 0) or not np.isfinite(tau):
        raise SchemaError(f"tau must be positive and finite, got {tau}")

    data, labels = [], []
    plotted: dict[str, np.ndarray] = {}
    for frame in frames:
        if not frame.rounds:
            raise SchemaError(f"{frame.path}: no rounds to plot")
        norm = np.asarray(frame.column("max_client_time"), dtype=float) / tau
        norm = norm[norm > 0]
        if len(norm) == 0:
            raise SchemaError(f"{frame.path}: every round has zero length")
        data.append(norm)
        labels.append(_LABELS.get(frame.strategy, frame.strategy))
        plotted[frame.strategy] = norm

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.violinplot(data, showmedians=True, widths=0.8)
    ax.axhline(1.0, color="red", linewidth=1.0, linestyle="--")
    ax.set_xticks(range(1, len(labels) + 1))
    ax.set_xticklabels(labels)
    ax.set_yscale("log")
    ax.set_ylabel("round length / deadline")
    fig.tight_layout()
    fig.savefig(out_image, dpi=120)
    plt.close(fig)
    return plotted
