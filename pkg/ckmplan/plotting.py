"""
SVG views of channel maps and planned trajectories. Rendering never feeds
back into numeric outputs.
"""
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle  # noqa: E402

from ckmplan.gridworld import EnvironmentScene  # noqa: E402

PALETTE = {"name": "viridis", "scale": "linear_db"}

plt.rcParams["svg.hashsalt"] = "ckmplan"


def _heatmap(ax, values_db: np.ndarray, scene: EnvironmentScene, label: str):
    # rows run along x, so transpose for an x-horizontal image
    image = ax.imshow(values_db.T, origin="lower", cmap=PALETTE["name"],
                      extent=(0.0, scene.width_m, 0.0, scene.depth_m), interpolation="nearest")
    ax.figure.colorbar(image, ax=ax, label=label)
    ax.plot(*scene.bs_xy, marker="^", color="red", markersize=8, linestyle="none", label="BS")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_xlim(0.0, scene.width_m)
    ax.set_ylim(0.0, scene.depth_m)
    return image


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def save_heatmap_svg(path, values_db: np.ndarray, scene: EnvironmentScene,
                     title: str = "channel gain", label: str = "gain (dB)") -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    _heatmap(ax, values_db, scene, label)
    ax.set_title(title)
    return _save(fig, path)


def save_trajectory_svg(path, values_db: np.ndarray, scene: EnvironmentScene,
                        trajectories: Sequence[np.ndarray], d_min: float = 0.0,
                        labels: Optional[Sequence[str]] = None, title: str = "trajectories") -> Path:
    """Trajectories, obstacle disks and start/end markers over a gain heatmap."""
    fig, ax = plt.subplots(figsize=(6, 5))
    _heatmap(ax, values_db, scene, "gain (dB)")
    for (cx, cy), r in scene.obstacles:
        ax.add_patch(Circle((cx, cy), r + d_min, fill=False, edgecolor="white", linestyle="--", linewidth=0.8))
    for m, q in enumerate(trajectories):
        q = np.asarray(q)
        name = labels[m] if labels is not None else f"UAV {m}"
        ax.plot(q[:, 0], q[:, 1], marker=".", linewidth=1.2, label=name)
        ax.plot(q[0, 0], q[0, 1], marker="o", color="white", markeredgecolor="black", linestyle="none")
        ax.plot(q[-1, 0], q[-1, 1], marker="s", color="white", markeredgecolor="black", linestyle="none")
    ax.legend(loc="upper right", fontsize="small")
    ax.set_title(title)
    return _save(fig, path)
