"""Training objectives: soft Dice with deep supervision, preceptor divergence,
shape compactness, and their weighted sum."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F



@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    dice_eps: float = 1e-5
    comp_eps: float = 1e-6
    # full resolution first
    ds_weights: tuple[float, ...] = (8 / 15, 4 / 15, 2 / 15, 1 / 15)
    div_per_dim: bool = False
    # perimeter weight inside the compactness ratio; 1.0 is the bare ratio
    comp_length_weight: float = 0.1

    def __post_init__(self):
        self.ds_weights = tuple(float(w) for w in self.ds_weights)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.dice_eps <= 0 or self.comp_eps <= 0 or self.comp_length_weight <= 0:
            raise ValueError("eps values and comp_length_weight must be positive")
        if any(w < 0 for w in self.ds_weights) or abs(sum(self.ds_weights) - 1.0) > 1e-6:
            raise ValueError(f"ds_weights must be nonnegative and sum to 1, got {self.ds_weights}")


@dataclass
class LossBreakdown:
    l_seg: torch.Tensor
    l_comp: torch.Tensor
    l_div: torch.Tensor
    l_total: torch.Tensor
    lambda1: float = 1.0
    lambda2: float = 0.1

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_seg", "l_comp", "l_div", "l_total")}


def dice_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice loss on (B, H, W) foreground probabilities, batch-averaged."""
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    labels = labels.to(probs.dtype)
    dims = tuple(range(1, probs.dim()))
    inter = (probs * labels).sum(dims)
    denom = probs.sum(dims) + labels.sum(dims)
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def sample_preceptor_triple(n: int, rng: np.random.Generator) -> tuple[int, int, int]:
    if n < 3:
        raise ValueError(f"need at least 3 preceptors, got {n}")
    i, j, k = rng.choice(n, size=3, replace=False)
    return int(i), int(j), int(k)


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # exact 0 at 0 with a zero (rather than infinite) gradient there
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def divergence_loss(bank: torch.Tensor, triple: tuple[int, int, int], per_dim: bool = False) -> torch.Tensor:
    """1 - sqrt(mean squared pairwise distance of three bank rows), batch-averaged.

    Negative once the pairwise distances exceed 1; ``per_dim`` divides the
    squared distances by C to keep the value in [0, 1].
    """
    i, j, k = triple
    if len({i, j, k}) != 3:
        raise ValueError(f"triple indices must be distinct, got {triple}")
    n = bank.shape[1]
    if not all(0 <= t < n for t in triple):
        raise ValueError(f"triple {triple} out of range for bank size {n}")
    pi, pj, pk = bank[:, i], bank[:, j], bank[:, k]
    sq = ((pi - pj) ** 2).sum(1) + ((pi - pk) ** 2).sum(1) + ((pj - pk) ** 2).sum(1)
    if per_dim:
        sq = sq / bank.shape[2]
    return (1 - _safe_sqrt(sq / 3)).mean()


def _forward_diff(p: torch.Tensor, dim: int) -> torch.Tensor:
    # p[.., i+1] - p[.., i] with zero beyond the last index
    pad = [0, 0, 0, 0]
    pad[(p.dim() - 1 - dim) * 2 + 1] = 1
    padded = F.pad(p, pad)
    return padded.narrow(dim, 1, p.shape[dim]) - p


def compactness_loss(probs: torch.Tensor, eps: float = 1e-6, length_weight: float = 1.0) -> torch.Tensor:
    """Isoperimetric ratio P^2 / (4 pi A) of (B, H, W) soft masks, batch-averaged.

    P sums sqrt(dx^2 + dy^2 + eps) over forward differences (zero beyond the
    last row/column) and is scaled by ``length_weight``; A = sum(probs) + eps.
    """
    if probs.dim() != 3:
        raise ValueError(f"expected (B, H, W) probabilities, got {tuple(probs.shape)}")
    dx = _forward_diff(probs, 2)
    dy = _forward_diff(probs, 1)
    perimeter = length_weight * torch.sqrt(dx ** 2 + dy ** 2 + eps).sum((1, 2))
    area = probs.sum((1, 2)) + eps
    return (perimeter ** 2 / (4 * math.pi * area)).mean()


def foreground_probs(logits: torch.Tensor, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Softmax foreground channel, after bilinear upsampling of the logits to ``size``."""
    if size is not None and tuple(logits.shape[-2:]) != tuple(size):
        logits = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
    return torch.softmax(logits, dim=1)[:, 1]


def total_loss(
    logits_per_scale: list[torch.Tensor],
    labels: torch.Tensor,
    banks: list[torch.Tensor],
    config: LossConfig,
    rng: np.random.Generator,
    require_banks: bool = True,
) -> LossBreakdown:
    """Weighted sum seg + lambda1 * comp + lambda2 * div.

    ``logits_per_scale`` is ordered full resolution first; coarser logits
    are upsampled to the label size before the Dice term. ``require_banks``
    is switched off only for the plain U-Net baseline, where l_div is 0.
    """
    if require_banks and not banks:
        raise ValueError("total_loss needs at least one basis bank")
    if len(logits_per_scale) > len(config.ds_weights):
        raise ValueError("more prediction scales than deep-supervision weights")
    size = tuple(labels.shape[-2:])
    weights = config.ds_weights[: len(logits_per_scale)]
    norm = sum(weights)
    probs_full = None
    l_seg = 0.0
    for w, logits in zip(weights, logits_per_scale):
        probs = foreground_probs(logits, size)
        if probs_full is None:
            probs_full = probs
        l_seg = l_seg + (w / norm) * dice_loss(probs, labels, config.dice_eps)
    l_comp = compactness_loss(probs_full, config.comp_eps, config.comp_length_weight)
    if banks:
        l_div = torch.stack(
            [divergence_loss(b, sample_preceptor_triple(b.shape[1], rng), config.div_per_dim) for b in banks]
        ).mean()
    else:
        l_div = torch.zeros((), dtype=probs_full.dtype)
    l_total = l_seg + config.lambda1 * l_comp + config.lambda2 * l_div
    return LossBreakdown(l_seg, l_comp, l_div, l_total, config.lambda1, config.lambda2)
