"""Frame-by-frame particle rendering to PNG images."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .format import BadFile, TrajectoryData, read_trajectory  # noqa: E402


class EmptyRange(Exception):
    """The requested frame range selects no frames."""


class ColorBy(enum.Enum):
    UNIFORM = "uniform"
    SPEED = "speed"
    HEIGHT = "height"


@dataclass
class RenderSpec:
    input_path: str
    out_dir: str
    axis: str = "y"               # projection axis dropped for 3D data
    frame_range: Optional[Tuple[int, int]] = None  # inclusive start, exclusive end
    point_size: float = 4.0
    color_by: ColorBy = ColorBy.UNIFORM
    gt_path: Optional[str] = None  # side-by-side ground-truth panel
    dpi: int = 80


_AXES = {"x": 0, "y": 1, "z": 2}


def _project(frame: np.ndarray, dim: int, axis: str) -> np.ndarray:
    if dim == 2:
        return frame
    drop = _AXES[axis]
    keep = [d for d in range(3) if d != drop]
    return frame[:, keep]


def _colors(spec: RenderSpec, traj: TrajectoryData, i: int):
    if spec.color_by is ColorBy.SPEED and traj.velocities is not None:
        return np.linalg.norm(traj.velocities[i], axis=1)
    if spec.color_by is ColorBy.HEIGHT:
        return traj.positions[i][:, traj.dim - 1]
    return None


def render_trajectory(spec: RenderSpec):
    """Write one frame_%05d.png per selected frame; returns the paths."""
    traj = read_trajectory(spec.input_path)
    gt = read_trajectory(spec.gt_path) if spec.gt_path else None
    lo, hi = spec.frame_range if spec.frame_range else (0, traj.n_frames)
    lo = max(lo, 0)
    hi = min(hi, traj.n_frames)
    if hi <= lo:
        raise EmptyRange(f"frame range [{lo}, {hi}) is empty")
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    span = traj.positions.reshape(-1, traj.dim)
    lim_lo = min(0.0, float(span.min()))
    lim_hi = max(1.0, float(span.max()))
    written = []
    panels = 2 if gt is not None else 1
    for i in range(lo, hi):
        fig, axes = plt.subplots(1, panels, figsize=(3 * panels, 3),
                                 squeeze=False, dpi=spec.dpi)
        frames = [(axes[0][0], traj, "prediction" if gt is not None else None)]
        if gt is not None:
            frames.append((axes[0][1], gt, "ground truth"))
        for ax, t, title in frames:
            pts = _project(t.positions[i], t.dim, spec.axis)
            colors = _colors(spec, t, i)
            if colors is None:
                ax.scatter(pts[:, 0], pts[:, 1], s=spec.point_size)
            else:
                ax.scatter(pts[:, 0], pts[:, 1], s=spec.point_size,
                           c=colors, cmap="viridis")
            ax.set_xlim(lim_lo, lim_hi)
            ax.set_ylim(lim_lo, lim_hi)
            ax.set_aspect("equal")
            ax.set_xticks([])
            ax.set_yticks([])
            if title:
                ax.set_title(title, fontsize=8)
        fig.suptitle(f"frame {i}  t={i * traj.frame_dt:.3f}s", fontsize=8)
        path = out_dir / f"frame_{i:05d}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
