"""Figures from exported results and simulation logs (written to files, never shown)."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import PlanningMetrics, PredictionMetrics  # noqa: E402


def plot_prediction(metrics: PredictionMetrics, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in sorted(metrics.mean):
        mu = np.asarray(metrics.mean[name])
        sd = np.asarray(metrics.std[name])
        t = metrics.dt * np.arange(1, len(mu) + 1)
        ax.plot(t, mu, label=name)
        ax.fill_between(t, mu - sd, mu + sd, alpha=0.15)
    ax.set_xlabel("prediction time [s]")
    ax.set_ylabel("position error [m]")
    ax.set_ylim(bottom=0)
    ax.set_title(f"{metrics.subset} ({metrics.records} records)", fontsize=9)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_planning(metrics: list[PlanningMetrics], path):
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    labels = [f"{m.scenario}\n{m.planner}" for m in metrics]
    x = np.arange(len(metrics))
    axes[0].bar(x, [m.collision_instances for m in metrics])
    axes[0].set_title("collision instances")
    for ax, key, title in ((axes[1], "trajectory_length", "length [m]"),
                           (axes[2], "trajectory_duration", "duration [s]")):
        st = [getattr(m, key) for m in metrics]
        ax.bar(x, [s.avg for s in st], yerr=[s.std for s in st], capsize=3)
        ax.set_title(title)
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_trajectories(robot_pos, goals, path, obstacle_pos=None):
    """Top (x-y) and side (x-z) views of executed robot paths; robot_pos is (T, n, 3)."""
    robot_pos = np.asarray(robot_pos)
    fig, (top, side) = plt.subplots(2, 1, figsize=(5, 7))
    for i in range(robot_pos.shape[1]):
        p = robot_pos[:, i]
        line, = top.plot(p[:, 0], p[:, 1], lw=1.2)
        side.plot(p[:, 0], p[:, 2], lw=1.2, color=line.get_color())
        top.plot(*goals[i, :2], "x", color=line.get_color())
        side.plot(goals[i, 0], goals[i, 2], "x", color=line.get_color())
    if obstacle_pos is not None and np.size(obstacle_pos):
        o = np.asarray(obstacle_pos)
        for k in range(o.shape[1]):
            top.plot(o[:, k, 0], o[:, k, 1], ":", color="gray", lw=0.8)
            side.plot(o[:, k, 0], o[:, k, 2], ":", color="gray", lw=0.8)
    top.set_aspect("equal")
    top.set_xlabel("x [m]")
    top.set_ylabel("y [m]")
    side.set_xlabel("x [m]")
    side.set_ylabel("z [m]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_curve(curve, path):
    """Training and validation loss per epoch; ``curve`` rows are (epoch, train, val)."""
    c = np.asarray(curve, dtype=float).reshape(-1, 3)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(c[:, 0], c[:, 1], label="train")
    ax.plot(c[:, 0], c[:, 2], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_all(out_dir, prediction=(), planning=(), sim_log=None, curve=None):
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for pm in prediction or ():
        if pm.mean and pm.records:
            name = "prediction_error.png" if pm.subset == "all" else f"prediction_error_{pm.subset}.png"
            files.append(plot_prediction(pm, os.path.join(out_dir, name)))
    if planning:
        files.append(plot_planning(list(planning), os.path.join(out_dir, "planning.png")))
    if sim_log is not None:
        files.append(plot_trajectories(sim_log["robot_pos"], sim_log["goals"][-1] if len(sim_log["goals"])
                                       else sim_log["robot_pos"][-1],
                                       os.path.join(out_dir, "trajectories.png"), sim_log.get("obstacle_pos")))
    if curve is not None and len(curve):
        files.append(plot_curve(curve, os.path.join(out_dir, "training_curve.png")))
    return files
