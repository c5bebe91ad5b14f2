"""Figure rendering for episode traces and tuning studies.

Renders matplotlib figures next to the delimited output the tools write.
All figures go through the Agg backend and strip volatile PNG metadata so a
rerun with identical inputs produces byte-identical image files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .simloop import EpisodeRecord  # noqa: E402

_METHOD_COLORS = {"turbo": "tab:blue", "sobol": "tab:orange"}
_PNG_META = {"Software": None}  # drop the version string; keep bytes stable


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def episode_figure(record: EpisodeRecord, path, title: str = "") -> None:
    """Three stacked panels: pendulum angle, cart position, applied input."""
    n_u = record.actions.shape[0]
    t_state = np.arange(record.states.shape[0]) * record.control_period
    t_u = np.arange(n_u) * record.control_period

    fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
    ax_phi, ax_pos, ax_u = axes

    ax_phi.plot(t_state, record.states[:, 1], color="tab:blue")
    ax_phi.axhline(0.0, color="0.6", lw=0.8)
    ax_phi.set_ylabel("angle [rad]")

    ax_pos.plot(t_state, record.states[:, 0], color="tab:green")
    ax_pos.set_ylabel("position [m]")

    if n_u:
        ax_u.step(t_u, record.actions, where="post", color="tab:red")
    ax_u.set_ylabel("input")
    ax_u.set_xlabel("time [s]")

    label = title or f"reward = {record.reward:.4f}"
    if record.failed:
        label += f" (failed: {record.fail_reason})"
    ax_phi.set_title(label)
    fig.tight_layout()
    _save(fig, path)


def incumbent_figure(histories: dict, path) -> None:
    """Incumbent-reward traces per method for a single tuning run.

    `histories` maps a method name to a 1-D array of incumbent rewards.
    """
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for method, inc in histories.items():
        inc = np.asarray(inc, dtype=float)
        episodes = np.arange(1, inc.shape[0] + 1)
        ax.plot(episodes, inc, marker="o", ms=3,
                color=_METHOD_COLORS.get(method), label=method)
    ax.set_xlabel("episode")
    ax.set_ylabel("incumbent reward")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def read_aggregate_csv(path) -> dict:
    """Load an `epoch,mean,min,max` file into arrays keyed by column."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"epoch", "mean", "min", "max"}:
        raise ValueError(f"{path} is not an aggregate CSV (epoch,mean,min,max)")
    return {key: np.array([float(r[key]) for r in rows])
            for key in ("epoch", "mean", "min", "max")}


def experiment_figure(out_dir, methods, seeds, path) -> None:
    """Mean incumbent with min/max band, one panel per seed, from aggregates."""
    out_dir = Path(out_dir)
    seeds = list(seeds)
    fig, axes = plt.subplots(1, len(seeds), figsize=(4.2 * len(seeds), 4.0),
                             sharey=True, squeeze=False)
    for ax, seed in zip(axes[0], seeds):
        for method in methods:
            agg = read_aggregate_csv(out_dir / f"aggregate_{method}_seed{seed}.csv")
            color = _METHOD_COLORS.get(method)
            ax.plot(agg["epoch"], agg["mean"], color=color, label=method)
            ax.fill_between(agg["epoch"], agg["min"], agg["max"],
                            color=color, alpha=0.2, lw=0)
        ax.set_title(f"seed {seed}")
        ax.set_xlabel("episode")
    axes[0][0].set_ylabel("incumbent reward")
    axes[0][0].legend(loc="lower right")
    fig.tight_layout()
    _save(fig, path)
