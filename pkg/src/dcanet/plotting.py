"""PNG rendering of training curves and 2-D slice overlays (matplotlib, Agg)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trainer import TrainLog  # noqa: E402

# fixed metadata so identical inputs give identical bytes
_PNG_META = {"Software": None}


def plot_curves(tlog: TrainLog, path, title: str = "") -> np.ndarray:
    """Loss components and validation Dice against iteration; returns the plotted iterations."""
    its = np.array([r["iteration"] for r in tlog.losses])
    fig, (ax_l, ax_d) = plt.subplots(1, 2, figsize=(9, 3.5), dpi=100)
    for key in ("l_total", "l_seg", "l_comp", "l_div"):
        ax_l.plot(its, [r[key] for r in tlog.losses], label=key, lw=0.8)
    ax_l.set_xlabel("iteration")
    ax_l.set_ylabel("loss")
    ax_l.legend(fontsize=7)
    if tlog.validations:
        ax_d.plot([v["iteration"] for v in tlog.validations], [v["val_dice"] for v in tlog.validations], "o-")
    ax_d.set_xlabel("iteration")
    ax_d.set_ylabel("val Dice (%)")
    if len(its):
        ax_d.set_xlim(its.min(), its.max())
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return its


def pick_slices(label: np.ndarray, n: int) -> list[int]:
    """n slice indices spread evenly over the slices that contain foreground (or over all slices)."""
    fg = np.flatnonzero(label.reshape(label.shape[0], -1).any(1))
    pool = fg if len(fg) else np.arange(label.shape[0])
    if n >= len(pool):
        return [int(z) for z in pool] + [int(pool[-1])] * (n - len(pool))
    return [int(pool[i]) for i in np.linspace(0, len(pool) - 1, n).round().astype(int)]


def plot_overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray, path, title: str = "") -> None:
    """One slice: grayscale image, ground-truth contour (green), prediction contour (red)."""
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    ax.imshow(image, cmap="gray", interpolation="nearest")
    if gt.any():
        ax.contour(gt.astype(float), levels=[0.5], colors="lime", linewidths=1.0)
    if pred.any():
        ax.contour(pred.astype(float), levels=[0.5], colors="red", linewidths=1.0)
    ax.set_axis_off()
    ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def render_overlays(model, volume, out_dir, n_slices: int, target_size: int, prefix: str = "") -> list[Path]:
    from .data import preprocess_volume
    from .metrics import predict_volume

    prep = preprocess_volume(volume, target_size)
    pred = predict_volume(model, prep.image)
    out_dir = Path(out_dir)
    paths = []
    for k, z in enumerate(pick_slices(prep.label, n_slices)):
        p = out_dir / f"{prefix}overlay_{volume.patient_id}_{k:02d}_z{z:03d}.png"
        plot_overlay(prep.image[z], prep.label[z], pred[z], p, f"{volume.patient_id} z={z}")
        paths.append(p)
    return paths
