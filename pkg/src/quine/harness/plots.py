"""Figures for experiment reports.  Imports matplotlib lazily (Agg backend)."""

from __future__ import annotations

import os
from pathlib import Path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_tree(tree: dict, path: str | os.PathLike) -> str:
    """Draw the delegation tree level by level; red nodes exited nonzero."""
    plt = _pyplot()
    levels: list[list[dict]] = []
    frontier = [tree]
    while frontier:
        levels.append(frontier)
        frontier = [c for n in frontier for c in n.get("children", [])]
    pos = {}
    for depth, nodes in enumerate(levels):
        for i, n in enumerate(nodes):
            pos[id(n)] = ((i + 1) / (len(nodes) + 1), -depth)

    width = max(4.0, 0.35 * max(len(l) for l in levels))
    fig, ax = plt.subplots(figsize=(width, 1.2 + 1.1 * len(levels)))
    for nodes in levels:
        for n in nodes:
            x0, y0 = pos[id(n)]
            for c in n.get("children", []):
                x1, y1 = pos[id(c)]
                ax.plot([x0, x1], [y0, y1], color="0.7", lw=0.8, zorder=1)
    for nodes in levels:
        xs = [pos[id(n)][0] for n in nodes]
        ys = [pos[id(n)][1] for n in nodes]
        colors = ["tab:red" if n.get("exit_status") not in (0, None) else "tab:blue" for n in nodes]
        ax.scatter(xs, ys, c=colors, s=40, zorder=2)
    ax.set_yticks([-d for d in range(len(levels))])
    ax.set_yticklabels([f"depth {d} ({len(l)})" for d, l in enumerate(levels)])
    ax.set_xticks([])
    for side in ("top", "right", "bottom"):
        ax.spines[side].set_visible(False)
    ax.set_title(f"delegation tree: {sum(len(l) for l in levels)} sessions")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_generations(events: list[dict], path: str | os.PathLike) -> str:
    """Guest calls over time, coloured by generation, with exec boundaries marked."""
    plt = _pyplot()
    if not events:
        raise ValueError("no events to plot")
    t0 = events[0]["ts"]
    fig, ax = plt.subplots(figsize=(7, 2.8))
    calls = [e for e in events if e["kind"] == "GuestCall"]
    ax.scatter([(e["ts"] - t0) / 1000 for e in calls], [e["generation"] for e in calls],
               c=[e["generation"] for e in calls], cmap="viridis", s=18, zorder=2)
    for e in events:
        if e["kind"] == "ExecBoundary":
            ax.axvline((e["ts"] - t0) / 1000, color="0.75", lw=0.8, ls="--", zorder=1)
    pids = sorted({e["pid"] for e in events})
    ax.set_xlabel("seconds since session start")
    ax.set_ylabel("generation")
    ax.set_title(f"exec renewal: pid {', '.join(map(str, pids))}")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
