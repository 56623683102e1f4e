"""Matplotlib rendering for explanation artifacts and training curves.

Figures are built with ``matplotlib.figure.Figure`` directly (no pyplot
state).  SVG output carries no date and a fixed hash salt so reruns are
byte-identical; every data point is drawn as its own artist with a
``point-<i>`` id.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

SVG_METADATA = {"Date": None, "Creator": "trd"}
COLORS = {"a": "#3366aa", "b": "#cc6633", "pos": "#c0392b", "neg": "#2c6fbb", "line": "#333333"}


def _save(fig: Figure, path: Path) -> Path:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower() or "svg"
    with matplotlib.rc_context({"svg.hashsalt": "trd", "svg.fonttype": "none"}):
        if fmt == "svg":
            fig.savefig(path, format="svg", metadata=SVG_METADATA)
        elif fmt == "png":
            fig.savefig(path, format="png", dpi=120, metadata={"Software": None})
        else:
            fig.savefig(path, format=fmt)
    return path


def _bars(ax, xs, values, color_fn):
    for i, (x, v) in enumerate(zip(xs, values)):
        (bar,) = ax.bar([x], [v], color=color_fn(v), width=0.8)
        bar.set_gid(f"point-{i}")


def render_artifact(artifact, path) -> Path:
    from .explain import artifact_type

    kind = artifact_type(artifact)
    fig = Figure(figsize=(7, 3.5))
    ax = fig.add_subplot()
    if kind == "timeline":
        ylabel = "P(reward)" if artifact.kind == "confidence" else "expected reward"
        _bars(ax, artifact.timesteps(), artifact.values, lambda v: COLORS["a"])
        width = "" if artifact.group_width == 1 else f" (groups of {artifact.group_width})"
        ax.set_xlabel(f"timesteps ahead{width}")
        ax.set_ylabel(ylabel)
        ax.set_title(f"state {artifact.state}, action {artifact.action}")
        if artifact.kind == "confidence":
            ax.set_ylim(0, 1.05)
    elif kind == "saliency":
        _bars(ax, range(len(artifact.importance)), artifact.importance,
              lambda v: COLORS["pos"] if v >= 0 else COLORS["neg"])
        ax.set_xlabel("feature index")
        ax.set_ylabel("importance")
        ax.set_ylim(-1.05, 1.05)
        ax.set_title(f"element {artifact.element}, action {artifact.action}")
    else:
        _bars(ax, range(len(artifact.diff)), artifact.diff,
              lambda v: COLORS["pos"] if v >= 0 else COLORS["neg"])
        ax.set_xlabel("reward-vector element (last = tail)")
        ax.set_ylabel(f"action {artifact.action_a} - action {artifact.action_b}")
        ax.set_title(f"scalar difference {artifact.scalar_diff:.3f}")
    ax.axhline(0.0, color=COLORS["line"], linewidth=0.6)
    fig.tight_layout()
    return _save(fig, path)


def render_curves(rows: list[dict], path, title: str = "") -> Path:
    """Two panels: teacher-normalized return and student/teacher Q MSE against step."""
    fig = Figure(figsize=(9, 3.5))
    ax_ret, ax_mse = fig.subplots(1, 2)
    steps = [r["step"] for r in rows]
    ax_ret.plot(steps, [r["normalized_return"] for r in rows], marker="o", color=COLORS["a"])
    ax_ret.set_xlabel("step")
    ax_ret.set_ylabel("teacher-normalized return")
    ax_mse.plot(steps, [r["q_mse"] for r in rows], marker="o", color=COLORS["b"])
    ax_mse.set_yscale("log")
    ax_mse.set_xlabel("step")
    ax_mse.set_ylabel("student vs teacher Q MSE")
    online = [r["step"] for r in rows if r["phase"] == "online"]
    offline = [r["step"] for r in rows if r["phase"] == "offline"]
    if online and offline:
        for ax in (ax_ret, ax_mse):
            ax.axvline(max(offline), color=COLORS["line"], linestyle="--", linewidth=0.8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)
