"""Figure rendering for run artifacts (headless, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .comms import MSG_NAMES

ROBOT_COLORS = ["tab:orange", "tab:blue", "tab:green", "tab:purple"]


def render_run_figures(out: Path, agents, gts, world, channel, gauge,
                       est_cloud) -> None:
    save_trajectory_figure(out / "trajectories.png", agents, gts)
    save_map_figure(out / "map.png", world, est_cloud, gauge)
    save_bandwidth_figure(out / "bandwidth.png", channel)


def save_trajectory_figure(path: Path, agents, gts) -> None:
    n = len(agents)
    fig, axes = plt.subplots(1, n, figsize=(5.2 * n, 5.0), squeeze=False)
    for ax, agent in zip(axes[0], agents):
        gt_agent = [gts[agent.id][0].inverse().compose(p) for p in gts[agent.id]]
        gt_xy = np.array([p.t[:2] for p in gt_agent])
        est_xy = np.array([p.t[:2] for p in agent.local.trajectory()])
        dead_xy = np.array([p.t[:2] for p in agent.local.dead_reckoning()])
        color = ROBOT_COLORS[agent.id % len(ROBOT_COLORS)]
        ax.plot(gt_xy[:, 0], gt_xy[:, 1], "k--", lw=1.0, label="ground truth")
        ax.plot(dead_xy[:, 0], dead_xy[:, 1], color="0.6", lw=0.8,
                label="odometry only")
        ax.plot(est_xy[:, 0], est_xy[:, 1], color=color, lw=1.4, label="estimate")
        ax.set_title(f"robot {agent.id} (map frame)")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.axis("equal")
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_map_figure(path: Path, world, est_cloud, gauge) -> None:
    fig, ax = plt.subplots(figsize=(7.0, 5.6))
    gt = world.gt_cloud
    sl = slice(None, None, max(1, len(gt) // 60000))
    ax.scatter(gt[sl, 0], gt[sl, 1], s=0.3, c="0.85", label="reference")
    if len(est_cloud):
        est = gauge.apply(est_cloud)
        sl = slice(None, None, max(1, len(est) // 60000))
        ax.scatter(est[sl, 0], est[sl, 1], s=0.3, c="tab:red", label="merged estimate")
    ax.set_title("merged map vs reference (top view)")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.axis("equal")
    ax.legend(loc="best", fontsize=8, markerscale=10)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_bandwidth_figure(path: Path, channel) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    events = channel.stats.events
    if events:
        last_tick = max(e[0] for e in events)
        for mtype, name in MSG_NAMES.items():
            series = np.zeros(last_tick + 2)
            for tick, _, t, nbytes in events:
                if t == mtype:
                    series[tick + 1] += nbytes
            cum = np.cumsum(series)
            if cum[-1] > 0:
                ax.plot(np.arange(len(cum)), cum / 1024.0, label=name)
        ax.set_yscale("log")
    ax.set_xlabel("tick")
    ax.set_ylabel("cumulative data [KiB]")
    ax.set_title("data exchanged by message type")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
