"""Figure rendering for the report path: trajectory plots, evaluation
summaries and training curves, written as PNG files next to the CSV output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

OBSTACLE_COLOR = (0.75, 0.75, 0.75)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def save_trajectory_figure(rows, world, path):
    """Top-down path with gates and obstacles, plus the altitude profile.

    rows: rollout rows as produced by harness.rollout_trajectory.
    """
    arr = np.array([r[:4] for r in rows], dtype=float)
    t, x, y, z = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]

    fig, (ax, axz) = plt.subplots(
        1, 2, figsize=(11, 4.5), gridspec_kw={"width_ratios": [1.6, 1.0]}
    )
    for o in world.obstacles:
        ax.add_patch(plt.Circle(o.center[:2], o.radius, color=OBSTACLE_COLOR, zorder=1))
    for i, wp in enumerate(world.track):
        ax.add_patch(
            plt.Circle(wp.center[:2], wp.pass_radius, fill=False, color="tab:blue", lw=1.0, zorder=2)
        )
        ax.annotate(str(i + 1), wp.center[:2], fontsize=8, ha="center", va="center", color="tab:blue")
    ax.plot(x, y, color="tab:red", lw=1.2, zorder=3)
    ax.plot(x[0], y[0], "o", color="tab:green", ms=5, zorder=4)
    ax.set_xlim(world.bounds_min[0], world.bounds_max[0])
    ax.set_ylim(world.bounds_min[1], world.bounds_max[1])
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title("top-down trajectory")

    axz.plot(t, z, color="tab:red", lw=1.2)
    for wp in world.track:
        axz.axhline(wp.center[2], color="tab:blue", lw=0.5, alpha=0.4)
    axz.set_xlabel("t [s]")
    axz.set_ylabel("z [m]")
    axz.set_title("altitude profile")
    fig.suptitle(f"final status: {rows[-1][-1]}", fontsize=10)
    return _save(fig, path)


def save_evaluation_figure(report, path):
    """Completion-time histogram and outcome counts."""
    fig, (ax, axc) = plt.subplots(1, 2, figsize=(9, 3.6))
    times = [r.completion_time for r in report.records if r.completion_time is not None]
    if times:
        ax.hist(times, bins=30, color="tab:blue", alpha=0.85)
        ax.axvline(np.mean(times), color="tab:red", lw=1.2,
                   label=f"mean {np.mean(times):.2f} s")
        ax.legend(fontsize=8)
    ax.set_xlabel("completion time [s]")
    ax.set_ylabel("count")
    ax.set_title("successful trajectories")

    labels = ["success", "crash", "timeout"]
    counts = [report.success_count, report.crash_count, report.timeout_count]
    axc.bar(labels, counts, color=["tab:green", "tab:red", "tab:orange"])
    axc.set_ylabel("count")
    axc.set_title(f"crash ratio {report.crash_ratio:.2f}%")
    return _save(fig, path)


def save_training_figure(rows, path):
    """Mean episode reward, completion time and crash fraction per update."""
    if not rows:
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.set_title("no training updates")
        return _save(fig, path)
    upd = np.array([r["update_index"] for r in rows], dtype=float)
    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    for ax, key, color in zip(
        axes,
        ("mean_reward", "mean_episode_time_s", "crash_fraction"),
        ("tab:blue", "tab:green", "tab:red"),
    ):
        vals = np.array([r[key] for r in rows], dtype=float)
        ax.plot(upd, vals, color=color, lw=1.0)
        ax.set_ylabel(key)
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("update")
    return _save(fig, path)
