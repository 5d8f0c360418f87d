"""Domain composition and attention (DCA) block.

A bank of N basis representations is computed from the pooled feature
descriptor by independent preceptors (one group of a grouped 1x1 conv
subnetwork each). An attention branch predicts simplex coefficients that
mix the bank into a channel-wise calibration vector, which rescales the
input feature map.
"""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError


def fan_in_uniform_(weight: torch.Tensor, generator: torch.Generator | None = None, gain: float = 1.0):
    """Fill ``weight`` from U(-b, b) with b = gain / sqrt(fan_in). Works for grouped convs too."""
    fan_in = weight[0].numel()
    bound = gain / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
    return weight


def avg_pool_features(feat: torch.Tensor) -> torch.Tensor:
    """Spatial mean per (batch, channel): (B, C, H, W) -> (B, C)."""
    if feat.dim() != 4:
        raise ValueError(f"expected a 4-D feature map, got shape {tuple(feat.shape)}")
    if feat.shape[2] == 0 or feat.shape[3] == 0:
        raise ValueError(f"feature map has zero spatial extent: {tuple(feat.shape)}")
    return feat.mean(dim=(2, 3))


def compose_calibration(bank: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """alpha[b, c] = sum_n beta[b, n] * bank[b, n, c]."""
    if bank.dim() != 3 or beta.dim() != 2:
        raise ValueError("bank must be (B, N, C) and beta (B, N)")
    if bank.shape[:2] != beta.shape:
        raise ValueError(f"bank {tuple(bank.shape)} and beta {tuple(beta.shape)} disagree on (B, N)")
    return torch.einsum("bn,bnc->bc", beta, bank)


def calibrate(feat: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Broadcast channel-wise rescaling F * alpha."""
    return feat * alpha[:, :, None, None]


class DCABlock(nn.Module):
    """Parallel domain preceptor bank + domain attention + calibration.

    Args:
        channels: C, channel count of the calibrated feature map.
        bank_size: N, number of basis preceptors (>= 3).
        reduction: r, hidden width per preceptor / attention FC is C // r.
        pdp_input: ``"tiled"`` feeds every preceptor the whole descriptor;
            ``"sliced"`` gives preceptor n only channels [n*C/N, (n+1)*C/N).
        gn_affine: learnable scale/shift in the preceptor group norms.
        generator: seeds the initialization.
    """

    def __init__(
        self,
        channels: int,
        bank_size: int = 8,
        reduction: int = 4,
        pdp_input: str = "tiled",
        gn_affine: bool = True,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if bank_size < 3:
            raise ConfigError(f"bank size must be >= 3 for triple sampling, got {bank_size}")
        if channels % reduction != 0:
            raise ConfigError(f"channels ({channels}) not divisible by reduction ({reduction})")
        if pdp_input not in ("tiled", "sliced"):
            raise ConfigError(f"unknown pdp_input {pdp_input!r}")
        if pdp_input == "sliced" and channels % bank_size != 0:
            raise ConfigError(f"sliced preceptor input needs channels ({channels}) divisible by N ({bank_size})")
        self.channels = channels
        self.bank_size = bank_size
        self.reduction = reduction
        self.pdp_input = pdp_input
        hidden = channels // reduction
        n = bank_size
        pdp_in = n * channels if pdp_input == "tiled" else channels

        self.pdp_conv1 = nn.Conv1d(pdp_in, n * hidden, kernel_size=1, groups=n)
        self.pdp_gn1 = nn.GroupNorm(n, n * hidden, affine=gn_affine)
        self.pdp_conv2 = nn.Conv1d(n * hidden, n * channels, kernel_size=1, groups=n)
        self.pdp_gn2 = nn.GroupNorm(n, n * channels, affine=gn_affine)

        self.attn_conv = nn.Conv2d(channels, channels, kernel_size=1)
        self.attn_fc1 = nn.Linear(channels, hidden)
        self.attn_fc2 = nn.Linear(hidden, n)

        # test hook: alpha == 1 everywhere
        self.force_unit_calibration = False
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None):
        for layer in (self.pdp_conv1, self.pdp_conv2, self.attn_conv, self.attn_fc1, self.attn_fc2):
            fan_in_uniform_(layer.weight, generator)
            nn.init.zeros_(layer.bias)
        for gn in (self.pdp_gn1, self.pdp_gn2):
            if gn.affine:
                nn.init.ones_(gn.weight)
                nn.init.zeros_(gn.bias)

    def group_parameter_slices(self, group: int) -> dict[str, slice]:
        """Leading-dim slice of each preceptor parameter that belongs to ``group``."""
        hidden = self.channels // self.reduction
        c = self.channels
        out = {
            "pdp_conv1.weight": slice(group * hidden, (group + 1) * hidden),
            "pdp_conv1.bias": slice(group * hidden, (group + 1) * hidden),
            "pdp_conv2.weight": slice(group * c, (group + 1) * c),
            "pdp_conv2.bias": slice(group * c, (group + 1) * c),
        }
        if self.pdp_gn1.affine:
            out["pdp_gn1.weight"] = out["pdp_gn1.bias"] = slice(group * hidden, (group + 1) * hidden)
            out["pdp_gn2.weight"] = out["pdp_gn2.bias"] = slice(group * c, (group + 1) * c)
        return out

    def preceptors(self, f: torch.Tensor) -> torch.Tensor:
        """Basis bank (B, N, C) from pooled descriptor f (B, C)."""
        b, c = f.shape
        if c != self.channels:
            raise ValueError(f"descriptor has {c} channels, block expects {self.channels}")
        x = f.repeat(1, self.bank_size) if self.pdp_input == "tiled" else f
        x = x.unsqueeze(-1)
        x = F.relu(self.pdp_gn1(self.pdp_conv1(x)))
        x = torch.sigmoid(self.pdp_gn2(self.pdp_conv2(x)))
        return x.view(b, self.bank_size, c)

    def attention_logits(self, feat: torch.Tensor) -> torch.Tensor:
        v = avg_pool_features(self.attn_conv(feat))
        return self.attn_fc2(F.relu(self.attn_fc1(v)))

    def attention(self, feat: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.attention_logits(feat), dim=1)

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        bank = self.preceptors(avg_pool_features(feat))
        if self.force_unit_calibration:
            alpha = torch.ones_like(bank[:, 0])
        else:
            alpha = compose_calibration(bank, self.attention(feat))
        return calibrate(feat, alpha), bank


def init_dca_params(channels: int, bank_size: int, reduction: int = 4, seed: int = 0, **kwargs) -> DCABlock:
    g = torch.Generator().manual_seed(seed)
    return DCABlock(channels, bank_size, reduction, generator=g, **kwargs)


def pdp_forward(f: torch.Tensor, block: DCABlock) -> torch.Tensor:
    return block.preceptors(f)


def attention_coefficients(feat: torch.Tensor, block: DCABlock) -> torch.Tensor:
    return block.attention(feat)


def dca_forward(feat: torch.Tensor, block: DCABlock) -> tuple[torch.Tensor, torch.Tensor]:
    return block(feat)
