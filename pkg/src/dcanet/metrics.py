"""Volume-level Dice and average surface distance (ASD) at physical spacing."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

# 6-connectivity in 3-D
_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)

ASD_CONVENTION = "symmetric: arithmetic mean of the two directed mean surface distances"


class UndefinedMetric(ValueError):
    """Metric is undefined for the inputs (e.g. ASD with an empty mask)."""


@dataclass
class EvalResult:
    domain_id: str
    patient_id: str
    dice_percent: float
    asd_mm: float | None  # None when undefined (empty mask)


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice in percent; 100 when both masks are empty."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2 * int(np.logical_and(p, g).sum()) / total


def extract_surface(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """(K, 3) mm coordinates of foreground voxels with a background face-neighbour.

    The region outside the array counts as background.
    """
    m = mask.astype(bool)
    if not m.any():
        return np.zeros((0, 3))
    interior = ndimage.binary_erosion(m, structure=_FACE_NEIGHBOURS, border_value=0)
    idx = np.argwhere(m & ~interior)
    return idx * np.asarray(spacing, dtype=np.float64)


def directed_mean_distance(src: np.ndarray, dst: np.ndarray) -> float:
    d, _ = cKDTree(dst).query(src, k=1)
    return float(d.mean())


def asd(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    sp = extract_surface(pred, spacing)
    sg = extract_surface(gt, spacing)
    if len(sp) == 0 or len(sg) == 0:
        raise UndefinedMetric("ASD is undefined when either mask is empty")
    return 0.5 * (directed_mean_distance(sp, sg) + directed_mean_distance(sg, sp))


def evaluate_masks(pred: np.ndarray, gt: np.ndarray, spacing, domain_id: str, patient_id: str) -> EvalResult:
    try:
        a = asd(pred, gt, spacing)
    except UndefinedMetric:
        a = None
    return EvalResult(domain_id, patient_id, dice_score(pred, gt), a)


# ---------------------------------------------------------------- reporting

CSV_COLUMNS = ("domain", "patient", "dice", "asd")


def write_results_csv(results: list[EvalResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in results:
            w.writerow([r.domain_id, r.patient_id, repr(r.dice_percent), "" if r.asd_mm is None else repr(r.asd_mm)])


def read_results_csv(path) -> list[EvalResult]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != CSV_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {tuple(rows[0].keys())}")
    return [EvalResult(r["domain"], r["patient"], float(r["dice"]), float(r["asd"]) if r["asd"] else None) for r in rows]


def _mean_std(vals):
    if not vals:
        return math.nan, math.nan
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std())


def aggregate(results: list[EvalResult]) -> list[dict]:
    """Per-domain mean/std rows plus a final "average" row (mean of domain means).

    Volumes with undefined ASD are excluded from the ASD mean and counted.
    """
    rows = []
    for dom in dict.fromkeys(r.domain_id for r in results):
        rs = [r for r in results if r.domain_id == dom]
        dm, ds = _mean_std([r.dice_percent for r in rs])
        am, as_ = _mean_std([r.asd_mm for r in rs if r.asd_mm is not None])
        rows.append(
            {"domain": dom, "dice_mean": dm, "dice_std": ds, "asd_mean": am, "asd_std": as_,
             "n": len(rs), "asd_missing": sum(r.asd_mm is None for r in rs)}
        )
    if rows:
        rows.append(
            {"domain": "average",
             "dice_mean": float(np.mean([r["dice_mean"] for r in rows])),
             "dice_std": float(np.std([r["dice_mean"] for r in rows])),
             "asd_mean": float(np.nanmean([r["asd_mean"] for r in rows])) if any(
                 not math.isnan(r["asd_mean"]) for r in rows) else math.nan,
             "asd_std": float(np.nanstd([r["asd_mean"] for r in rows])) if any(
                 not math.isnan(r["asd_mean"]) for r in rows) else math.nan,
             "n": sum(r["n"] for r in rows), "asd_missing": sum(r["asd_missing"] for r in rows)}
        )
    return rows


SUMMARY_COLUMNS = ("domain", "dice_mean", "dice_std", "asd_mean", "asd_std", "n", "asd_missing")


def write_summary_csv(rows: list[dict], path, convention: str = ASD_CONVENTION) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# asd_convention: {convention}\n")
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for r in csv.DictReader(lines):
        out.append({k: (r[k] if k == "domain" else (int(r[k]) if k in ("n", "asd_missing") else float(r[k])))
                    for k in SUMMARY_COLUMNS})
    return out


def format_summary(rows: list[dict]) -> str:
    lines = [f"{'domain':<10} {'Dice (%)':>16} {'ASD (mm)':>16}"]
    for r in rows:
        lines.append(
            f"{r['domain']:<10} {r['dice_mean']:7.2f} ± {r['dice_std']:5.2f}  {r['asd_mean']:7.2f} ± {r['asd_std']:5.2f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------- model evaluation


def predict_volume(model, image: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax mask (D, H, W) from slice triples of an already-preprocessed image volume."""
    import torch

    from .data import slice_triple

    depth = image.shape[0]
    masks = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, depth, batch_size):
            zs = range(start, min(start + batch_size, depth))
            x = torch.from_numpy(np.stack([slice_triple(image, z) for z in zs])).float()
            logits = model(x).logits_per_scale[0]
            masks.append(logits.argmax(1).numpy().astype(np.uint8))
    model.train(was_training)
    return np.concatenate(masks, axis=0)


def evaluate_volume(model, volume, domain_id: str = "", target_size: int = 64, normalize: bool = True,
                    batch_size: int = 16) -> EvalResult:
    """Predict on the preprocessed volume, resize back (nearest) and score at native spacing."""
    from .data import preprocess_volume, resize_slices

    prep = preprocess_volume(volume, target_size, normalize)
    mask = predict_volume(model, prep.image, batch_size)
    mask = resize_slices(mask, volume.label.shape[1:], "nearest")
    return evaluate_masks(mask, volume.label, volume.spacing, domain_id, volume.patient_id)
