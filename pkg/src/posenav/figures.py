"""Figure rendering for evaluation reports.

Every plot takes already-computed data (suite reports or CSV rows) and
writes one PNG next to the delimited output; nothing here re-runs an
experiment.  The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .generator import GeneratorSpec, PoseState, perceptual_loss, render
from .geometry import EulerPose, wrap_angle

_DPI = 150


def _finish(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)
    return out_path


def sweep_figure(rows: list[dict], out_path, metric: str = "rotation_ap30") -> Path:
    """AP against initialization angle, one line per policy.

    Expects long-format rows with condition strings "sweep:<angle>"; rows
    for other conditions or metrics are ignored.
    """
    series: dict[str, list[tuple[int, float, float]]] = defaultdict(list)
    for row in rows:
        cond = str(row["condition"])
        if not cond.startswith("sweep:") or row["metric"] != metric:
            continue
        angle = int(cond.split(":", 1)[1])
        series[str(row["policy"])].append(
            (angle, float(row["value"]), float(row["stddev"]))
        )
    if not series:
        raise ValueError(f"no sweep rows with metric {metric!r}")
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for policy, pts in sorted(series.items()):
        pts.sort()
        angles = [p[0] for p in pts]
        values = [p[1] for p in pts]
        spread = [p[2] for p in pts]
        ax.errorbar(angles, values, yerr=spread, marker="o", markersize=3,
                    capsize=2, linewidth=1.2, label=policy)
    ax.set_xlabel("initialization offset (deg)")
    ax.set_ylabel(metric)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xticks([p[0] for p in next(iter(series.values()))][::2])
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _finish(fig, out_path)


def robustness_figure(rows: list[dict], out_path, metric: str = "rotation_ap30") -> Path:
    """AP against disturbance magnitude, one panel per disturbance kind.

    Expects condition strings "<kind>:<magnitude>".
    """
    panels: dict[str, dict[str, list[tuple[float, float]]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        cond = str(row["condition"])
        if ":" not in cond or cond.startswith("sweep:") or row["metric"] != metric:
            continue
        kind, mag = cond.split(":", 1)
        panels[kind][str(row["policy"])].append((float(mag), float(row["value"])))
    if not panels:
        raise ValueError(f"no robustness rows with metric {metric!r}")
    kinds = sorted(panels)
    fig, axes = plt.subplots(1, len(kinds), figsize=(3.2 * len(kinds), 3.2),
                             sharey=True, squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        for policy, pts in sorted(panels[kind].items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    marker="o", markersize=3, linewidth=1.2, label=policy)
        ax.set_title(kind, fontsize=9)
        ax.set_xlabel("magnitude")
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel(metric)
    axes[0][0].set_ylim(-0.02, 1.02)
    axes[0][-1].legend(fontsize=8)
    return _finish(fig, out_path)


def timing_figure(times: dict[str, float], out_path) -> Path:
    """Horizontal bars of per-image inference time, log scale."""
    if not times:
        raise ValueError("no timings to plot")
    names = sorted(times, key=times.get)
    values = [times[n] for n in names]
    fig, ax = plt.subplots(figsize=(5.5, 0.5 + 0.4 * len(names)))
    ax.barh(names, values, color="#4878a8")
    ax.set_xscale("log")
    ax.set_xlabel("seconds per image")
    for y, v in enumerate(values):
        ax.text(v, y, f" {v:.3g}s", va="center", fontsize=8)
    ax.grid(alpha=0.3, axis="x")
    return _finish(fig, out_path)


def landscape_figure(spec: GeneratorSpec, goal: PoseState, out_path,
                     azimuth_steps: int = 73, elevation_steps: int = 5,
                     elevation_span: float = math.radians(20.0)) -> Path:
    """Loss heatmap over azimuth x elevation offsets plus the zero slice.

    The bottom panel is the azimuth slice through the goal elevation,
    the one whose second basin the escape benchmark is built on.
    """
    target = render(spec, goal)
    azs = np.linspace(-math.pi, math.pi, azimuth_steps)
    els = np.linspace(-elevation_span, elevation_span, elevation_steps)
    grid = np.empty((elevation_steps, azimuth_steps))
    for i, de in enumerate(els):
        for j, da in enumerate(azs):
            state = PoseState(
                EulerPose(
                    float(wrap_angle(goal.theta.azimuth + da)),
                    goal.theta.elevation + de,
                    goal.theta.inplane,
                ),
                goal.trans,
                goal.z,
            )
            grid[i, j] = perceptual_loss(render(spec, state), target).value
    fig, (top, bottom) = plt.subplots(
        2, 1, figsize=(6.4, 4.4), height_ratios=[2, 1], sharex=True
    )
    extent = (-180.0, 180.0, math.degrees(els[0]), math.degrees(els[-1]))
    im = top.imshow(grid, aspect="auto", origin="lower", extent=extent, cmap="viridis")
    top.set_ylabel("elevation offset (deg)")
    fig.colorbar(im, ax=top, label="loss")
    mid = elevation_steps // 2
    bottom.plot(np.degrees(azs), grid[mid], linewidth=1.2)
    bottom.set_xlabel("azimuth offset (deg)")
    bottom.set_ylabel("loss")
    bottom.grid(alpha=0.3)
    return _finish(fig, out_path)


def training_figure(losses: dict[str, list[float]], out_path,
                    xlabel: str = "epoch") -> Path:
    """Loss curves for one or more training runs on a shared axis."""
    if not losses or all(len(v) == 0 for v in losses.values()):
        raise ValueError("no loss curves to plot")
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for name, curve in sorted(losses.items()):
        ax.plot(range(1, len(curve) + 1), curve, linewidth=1.2, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _finish(fig, out_path)
