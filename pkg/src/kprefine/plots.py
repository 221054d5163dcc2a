"""Static SVG traces of one keypoint: all rotation candidates, ground truth, refined track."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np


def plot_keypoint_trace(
    path,
    title: str,
    frames: Sequence[int],
    gt: np.ndarray,
    gt_visible: np.ndarray,
    pred: np.ndarray,
    candidates: Optional[Sequence[tuple[int, float, float, float]]] = None,
) -> Path:
    """Two panels (x and y against frame index).

    ``gt`` and ``pred`` are (F, 2) arrays, NaN where missing; ``candidates``
    holds (frame, x, y, confidence) tuples drawn darker for higher confidence.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    frames = np.asarray(frames)
    gt = np.where(np.asarray(gt_visible)[:, None], gt, np.nan)
    with plt.rc_context({"svg.hashsalt": "kprefine", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
        for axis, ax in enumerate(axes):
            if candidates:
                c = np.asarray(candidates, dtype=float)
                ax.scatter(c[:, 0], c[:, 1 + axis], s=6, c=c[:, 3], cmap="Greys", vmin=0, vmax=1,
                           label="rotation candidates", linewidths=0)
            ax.plot(frames, gt[:, axis], "-", color="tab:red", lw=1.5, label="ground truth")
            ax.plot(frames, pred[:, axis], "-", color="gold", lw=1.5, label="refined")
            ax.set_ylabel("xy"[axis] + " [px]")
        axes[0].set_title(title)
        axes[1].set_xlabel("frame")
        axes[0].legend(loc="best", fontsize=7)
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
