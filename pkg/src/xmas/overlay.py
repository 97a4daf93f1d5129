"""Mid-slice overlay figures: gold contour against predicted contour."""

from __future__ import annotations

from pathlib import Path

from .errors import DependencyError
from .field import LabelVolume, ScalarVolume


def save_overlay(path, image: ScalarVolume, gold: LabelVolume, pred: LabelVolume, structure: int = 1) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise DependencyError("overlays need matplotlib (pip install matplotlib)") from exc
    z = image.grid.shape[2] // 2
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    ax.imshow(image.values[:, :, z].T, cmap="gray", origin="lower")
    for lab, colour in ((gold, "tab:green"), (pred, "tab:red")):
        mask = (lab.labels[:, :, z] == structure).T.astype(float)
        if mask.any():
            ax.contour(mask, levels=[0.5], colors=colour, linewidths=1.2)
    ax.set_title(f"structure {structure}: gold (green) vs fused (red), z={z}", fontsize=8)
    ax.set_axis_off()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
