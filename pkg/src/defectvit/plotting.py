"""SVG figures: per-epoch training curves and prediction overlays."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

# fixed ids and no timestamp keep reruns byte-identical
plt.rcParams["svg.hashsalt"] = "defectvit"
_SVG_META = {"Date": None}

CURVES = {
    "loss": ("train_loss", "val_loss", "combined loss"),
    "accuracy": ("train_accuracy", "val_accuracy", "modified accuracy"),
    "mae": ("train_mae", "val_mae", "MAE (px)"),
    "mean_iou": ("train_mean_iou", "val_mean_iou", "mean IoU"),
}


def _series(history: list[dict], key: str) -> tuple[list[int], list[float]]:
    xs, ys = [], []
    for row in history:
        v = row.get(key)
        if isinstance(v, (int, float)):
            xs.append(int(row["epoch"]))
            ys.append(float(v))
    return xs, ys


def plot_history(history: list[dict], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    for name, (tk, vk, label) in CURVES.items():
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for key, style in ((tk, "-"), (vk, "--")):
            xs, ys = _series(history, key)
            ax.plot(xs, ys, style, label=key.split("_")[0])
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{name}.svg"
        fig.savefig(path, format="svg", metadata=_SVG_META)
        plt.close(fig)
        written.append(path)
    return written


def plot_detections(image: np.ndarray, detections: Sequence[dict], path: str | Path,
                    class_names: Sequence[str], ground_truth: Sequence[dict] = ()) -> Path:
    """Boxes drawn over a grayscale image; detections are dicts in the JSON box shape."""
    h, w = image.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4 * h / max(w, 1)))
    ax.imshow(image, cmap="gray", vmin=0.0, vmax=1.0, extent=(0, w, h, 0), interpolation="nearest")
    colors = plt.get_cmap("tab10")
    for g in ground_truth:
        ax.add_patch(Rectangle((g["x1"], g["y1"]), g["x2"] - g["x1"], g["y2"] - g["y1"],
                               fill=False, edgecolor="white", linestyle=":", linewidth=1))
    for d in detections:
        c = colors(d["class"] % 10)
        ax.add_patch(Rectangle((d["x1"], d["y1"]), d["x2"] - d["x1"], d["y2"] - d["y1"],
                               fill=False, edgecolor=c, linewidth=1.5))
        label = class_names[d["class"]] if d["class"] < len(class_names) else str(d["class"])
        ax.text(d["x1"], d["y1"], f"{label} {d.get('score', 1.0):.2f}", color=c, fontsize=6, va="bottom")
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_ablation(rows: Sequence[dict], path: str | Path) -> Path:
    """Train-minus-val accuracy gap per epoch for each encoder run."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for r in rows:
        ax.plot(r["epochs"], r["gaps"], label=r["label"])
    ax.set_xlabel("epoch")
    ax.set_ylabel("train - val accuracy")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return Path(path)
