"""2-D U-Net backbone with a DCA block inside every decoder conv block."""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
from torch import nn
import torch.nn.functional as F

from .dca import DCABlock, fan_in_uniform_
from .errors import CheckpointError, ConfigError

CHECKPOINT_MAGIC = b"DCANET1"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    in_channels: int = 3
    num_classes: int = 2
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    bank_size: int = 8
    reduction: int = 4
    use_dca: bool = True
    deep_supervision: bool = True
    upsample: str = "nearest"  # or "transposed"
    pdp_input: str = "tiled"
    gn_affine: bool = True

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if len(self.encoder_widths) != 5:
            raise ConfigError(f"encoder_widths needs 5 entries, got {len(self.encoder_widths)}")
        if self.upsample not in ("nearest", "transposed"):
            raise ConfigError(f"unknown upsample mode {self.upsample!r}")
        if self.use_dca:
            if self.bank_size < 3:
                raise ConfigError(f"bank_size must be >= 3, got {self.bank_size}")
            bad = [w for w in self.encoder_widths[:-1] if w % self.reduction]
            if bad:
                raise ConfigError(f"decoder widths {bad} not divisible by reduction {self.reduction}")

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        # coarse to fine, matching decoder execution order
        return tuple(reversed(self.encoder_widths[:-1]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d


class ForwardOutput(NamedTuple):
    logits_per_scale: list[torch.Tensor]  # full resolution first
    banks: list[torch.Tensor]  # decoder order, coarse to fine


class InstanceNorm(nn.Module):
    """Affine per-sample, per-channel normalization over H and W.

    Unlike ``nn.InstanceNorm2d`` this accepts a 1x1 map (output = shift), so
    16x16 inputs work with a five-scale encoder.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        if x.shape[-1] * x.shape[-2] > 1:
            return F.group_norm(x, x.shape[1], self.weight, self.bias, self.eps)
        var, mean = torch.var_mean(x, dim=(2, 3), keepdim=True, correction=0)
        x = (x - mean) * torch.rsqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def conv_in_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        InstanceNorm(cout),
        nn.ReLU(inplace=True),
    )


class EncoderBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = conv_in_relu(cin, cout)
        self.conv2 = conv_in_relu(cout, cout)

    def forward(self, x):
        return self.conv2(self.conv1(x))


class DecoderBlock(nn.Module):
    """upsample -> concat skip -> conv1 -> [DCA] -> conv2."""

    def __init__(self, cin, cskip, cout, config: NetworkConfig, generator=None):
        super().__init__()
        if config.upsample == "transposed":
            self.up = nn.ConvTranspose2d(cin, cskip, 2, stride=2)
        else:
            self.up = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cin, cskip, 3, padding=1))
        self.conv1 = conv_in_relu(2 * cskip, cout)
        self.dca = (
            DCABlock(cout, config.bank_size, config.reduction, config.pdp_input, config.gn_affine, generator)
            if config.use_dca
            else None
        )
        self.conv2 = conv_in_relu(cout, cout)

    def forward(self, x, skip):
        x = self.conv1(torch.cat([self.up(x), skip], dim=1))
        bank = None
        if self.dca is not None:
            x, bank = self.dca(x)
        return self.conv2(x), bank


class DCAUNet(nn.Module):
    def __init__(self, config: NetworkConfig, seed: int = 0):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(seed)
        w = config.encoder_widths
        self.encoders = nn.ModuleList(
            [EncoderBlock(config.in_channels if i == 0 else w[i - 1], w[i]) for i in range(5)]
        )
        self.decoders = nn.ModuleList([DecoderBlock(w[i + 1], w[i], w[i], config, g) for i in reversed(range(4))])
        n_heads = 4 if config.deep_supervision else 1
        # heads[0] sits on the finest decoder output
        self.heads = nn.ModuleList([nn.Conv2d(w[i], config.num_classes, 1) for i in range(n_heads)])
        self._init_backbone(g)

    def _init_backbone(self, g):
        for name, m in self.named_modules():
            if ".dca" in name or name.startswith("dca"):
                continue
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in_uniform_(m.weight, g, gain=math.sqrt(6.0))
                nn.init.zeros_(m.bias)

    @property
    def dca_blocks(self) -> list[DCABlock]:
        return [d.dca for d in self.decoders if d.dca is not None]

    def set_unit_calibration(self, flag: bool = True):
        for blk in self.dca_blocks:
            blk.force_unit_calibration = flag

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"input height/width must be divisible by 16, got {h}x{w}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        feats, banks = [], []
        for dec in self.decoders:
            x, bank = dec(x, skips.pop())
            feats.append(x)
            if bank is not None:
                banks.append(bank)
        feats = feats[::-1]  # finest first
        logits = [head(f) for head, f in zip(self.heads, feats)]
        return ForwardOutput(logits, banks)


def build_dca_unet(config: NetworkConfig, seed: int = 0) -> DCAUNet:
    return DCAUNet(config, seed)


def build_baseline_unet(config: NetworkConfig, seed: int = 0) -> DCAUNet:
    """Plain U-Net ("DeepAll"): same backbone, no DCA blocks."""
    cfg = NetworkConfig(**{**config.to_dict(), "use_dca": False})
    return DCAUNet(cfg, seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: DCAUNet, optimizer=None, iteration: int = 0, extra: dict | None = None):
    """Write magic header + version byte followed by a torch-serialized payload."""
    payload = {
        "config": model.config.to_dict(),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "iteration": int(iteration),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(buf.getvalue())


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a DCA-Net checkpoint (bad magic header)")
    version = blob[len(CHECKPOINT_MAGIC)]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    return torch.load(io.BytesIO(blob[len(CHECKPOINT_MAGIC) + 1 :]), weights_only=True)


def load_checkpoint(path, expected: NetworkConfig | None = None) -> tuple[DCAUNet, dict]:
    """Rebuild the model stored at ``path``.

    If ``expected`` is given, its architecture must match the stored config.
    """
    payload = read_checkpoint(path)
    cfg = NetworkConfig(**payload["config"])
    if expected is not None:
        mismatch = {
            k: (v, getattr(cfg, k))
            for k, v in expected.to_dict().items()
            if k in ("encoder_widths", "bank_size", "reduction", "use_dca", "in_channels", "num_classes", "pdp_input")
            and v != getattr(cfg, k) and not (k == "encoder_widths" and tuple(v) == tuple(cfg.encoder_widths))
        }
        if mismatch:
            raise CheckpointError(f"{path}: checkpoint/config mismatch (expected, stored): {mismatch}")
    model = DCAUNet(cfg)
    model.load_state_dict(payload["params"])
    return model, payload
