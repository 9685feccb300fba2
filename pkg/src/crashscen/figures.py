"""Matplotlib figures written next to the CLI's text reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from .roadnet import RoadGraph, classify_nodes, NodeClass  # noqa: E402
from .trajectory import CriticalityReport, TrajectorySet, box_corners  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}

_CLASS_STYLE = {
    NodeClass.TRUE_INTERSECTION: ("tab:red", "o"),
    NodeClass.THROUGH_NODE: ("tab:gray", "s"),
    NodeClass.DEAD_END: ("tab:blue", "^"),
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_trajectories(ts: TrajectorySet, report: CriticalityReport, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        d = np.stack([np.hypot(o.x - ts.ego.x, o.y - ts.ego.y) for o in ts.others]).min(axis=0)
        i_star = int(np.argmin(d))
        for tr in ts.agents:
            color = "tab:red" if tr.role == "ego" else None
            (line,) = ax.plot(tr.x, tr.y, lw=1.2, color=color, label=tr.agent_id)
            corners = box_corners(tr.x[i_star], tr.y[i_star], tr.heading[i_star], tr.length[i_star], tr.width[i_star])
            ax.add_patch(Polygon(corners, closed=True, fill=False, ec=line.get_color(), lw=1.0))
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_title(f"{report.level} (S_e={report.score}), boxes at t={ts.t[i_star]:.2f} s")
        ax.legend(loc="best")
        written.append(_save(fig, out_dir / "trajectories.png"))

        fig, axes = plt.subplots(3, 1, figsize=(6, 6), sharex=True)
        series = report.series
        t = np.asarray(series["t"])
        axes[0].plot(t, series["min_distance"], color="k", lw=1)
        axes[0].set_ylabel("min distance [m]")
        for aid, vals in series["ttc"].items():
            v = np.array([np.nan if x is None else x for x in vals], dtype=float)
            axes[1].plot(t, v, lw=1, label=aid)
        axes[1].axhline(3.0, ls="--", lw=0.8, color="tab:orange")
        axes[1].set_ylim(0, 10)
        axes[1].set_ylabel("TTC [s]")
        axes[1].legend(loc="upper right")
        axes[2].plot(t, series["interaction"], color="tab:purple", lw=1)
        axes[2].set_ylabel("I(t) [1/m]")
        axes[2].set_xlabel("t [s]")
        for ax in axes:
            ax.grid(alpha=0.3)
        written.append(_save(fig, out_dir / "criticality_series.png"))
    return written


def _draw_network(ax, graph: RoadGraph, title: str) -> None:
    for e in graph.edges:
        a, b = graph.nodes[e.from_node], graph.nodes[e.to_node]
        ax.plot([a.x, b.x], [a.y, b.y], color="0.4", lw=0.8 + 0.8 * e.lane_count)
    classes = classify_nodes(graph).classes
    for cls, (color, marker) in _CLASS_STYLE.items():
        pts = [graph.nodes[n] for n, c in classes.items() if c is cls]
        if pts:
            ax.scatter([p.x for p in pts], [p.y for p in pts], c=color, marker=marker, s=25, label=cls.value, zorder=3)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(title)
    ax.legend(loc="best")


def plot_networks(gt: RoadGraph, candidate: RoadGraph, out_dir: str | Path) -> Path:
    with plt.rc_context(RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 4.5))
        _draw_network(a1, gt, "ground truth")
        _draw_network(a2, candidate, "candidate")
        return _save(fig, Path(out_dir) / "networks.png")
