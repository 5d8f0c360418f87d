import numpy as np
import pytest
import torch

from dcanet.dca import DCABlock
from dcanet.errors import CheckpointError, ConfigError
from dcanet.losses import LossConfig, total_loss
from dcanet.network import (
    CHECKPOINT_MAGIC,
    NetworkConfig,
    build_baseline_unet,
    build_dca_unet,
    count_parameters,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)

SMALL = dict(encoder_widths=(8, 16, 32, 64, 128))


def test_default_config_widths():
    cfg = NetworkConfig()
    assert cfg.encoder_widths == (16, 32, 64, 128, 256)
    assert cfg.bank_size == 8 and cfg.in_channels == 3


def test_default_has_four_dca_blocks():
    model = build_dca_unet(NetworkConfig())
    assert len(model.dca_blocks) == 4
    assert sum(isinstance(m, DCABlock) for m in model.modules()) == 4


def test_forward_shapes():
    model = build_dca_unet(NetworkConfig())
    out = model(torch.randn(2, 3, 64, 64))
    assert out.logits_per_scale[0].shape == (2, 2, 64, 64)
    assert [t.shape[-1] for t in out.logits_per_scale] == [64, 32, 16, 8]
    assert [tuple(b.shape) for b in out.banks] == [(2, 8, c) for c in (128, 64, 32, 16)]


@pytest.mark.parametrize("batch,h,w", [(1, 16, 16), (3, 32, 48), (8, 16, 32)])
def test_shape_contract(batch, h, w):
    model = build_dca_unet(NetworkConfig(**SMALL, bank_size=4))
    out = model(torch.randn(batch, 3, h, w))
    assert out.logits_per_scale[0].shape == (batch, 2, h, w)
    assert len(out.banks) == 4


def test_indivisible_input():
    model = build_dca_unet(NetworkConfig(**SMALL))
    with pytest.raises(ValueError, match="divisible by 16"):
        model(torch.randn(1, 3, 40, 64))


def test_baseline_has_no_banks():
    model = build_baseline_unet(NetworkConfig(**SMALL))
    out = model(torch.randn(1, 3, 32, 32))
    assert out.banks == []
    assert model.dca_blocks == []


def test_forward_is_pure():
    model = build_dca_unet(NetworkConfig(**SMALL), seed=1).eval()
    x = torch.randn(2, 3, 32, 32)
    a, b = model(x), model(x)
    for ta, tb in zip(a.logits_per_scale + a.banks, b.logits_per_scale + b.banks):
        assert torch.equal(ta, tb)


def test_parameter_count_difference():
    cfg = NetworkConfig(**SMALL)
    dca, base = build_dca_unet(cfg), build_baseline_unet(cfg)
    dca_params = sum(count_parameters(b) for b in dca.dca_blocks)
    assert count_parameters(dca) - count_parameters(base) == dca_params
    # hand count for one block: C=8, N=8, r=4, hidden=2
    c, n, h = 8, 8, 2
    expected = (n * h * c + n * h) + 2 * n * h + (n * c * h + n * c) + 2 * n * c + (c * c + c) + (c * h + h) + (h * n + n)
    assert count_parameters(dca.decoders[-1].dca) == expected


def test_shared_encoder_shapes():
    cfg = NetworkConfig(**SMALL)
    dca, base = build_dca_unet(cfg), build_baseline_unet(cfg)
    enc = lambda m: {k: v.shape for k, v in m.state_dict().items() if k.startswith("encoders")}
    assert enc(dca) == enc(base)


def test_unit_calibration_matches_plain_unet():
    cfg = NetworkConfig(**SMALL)
    dca = build_dca_unet(cfg, seed=4).eval()
    base = build_baseline_unet(cfg, seed=99).eval()
    missing, unexpected = base.load_state_dict(dca.state_dict(), strict=False)
    assert missing == [] and all(".dca." in k for k in unexpected)
    dca.set_unit_calibration(True)
    x = torch.randn(2, 3, 32, 32)
    for a, b in zip(dca(x).logits_per_scale, base(x).logits_per_scale):
        assert torch.equal(a, b)


def test_gradient_reaches_every_parameter():
    model = build_dca_unet(NetworkConfig(**SMALL, bank_size=4), seed=0)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 3, 32, 32, generator=g)
    y = (torch.rand(2, 32, 32, generator=g) > 0.7).long()
    out = model(x)
    total_loss(out.logits_per_scale, y, out.banks, LossConfig(), np.random.default_rng(0)).l_total.backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or torch.count_nonzero(p.grad) == 0]
    assert dead == []


def test_invalid_configs():
    with pytest.raises(ConfigError):
        NetworkConfig(encoder_widths=(8, 16, 32, 64))
    with pytest.raises(ConfigError):
        NetworkConfig(encoder_widths=(6, 16, 32, 64, 128))
    with pytest.raises(ConfigError):
        NetworkConfig(bank_size=2)
    NetworkConfig(encoder_widths=(6, 16, 32, 64, 128), use_dca=False)


def test_transposed_upsampling():
    model = build_dca_unet(NetworkConfig(**SMALL, upsample="transposed"))
    assert model(torch.randn(1, 3, 32, 32)).logits_per_scale[0].shape == (1, 2, 32, 32)


def test_no_deep_supervision_single_head():
    model = build_dca_unet(NetworkConfig(**SMALL, deep_supervision=False))
    assert len(model(torch.randn(1, 3, 32, 32)).logits_per_scale) == 1


def test_deterministic_init():
    a, b = build_dca_unet(NetworkConfig(**SMALL), seed=7), build_dca_unet(NetworkConfig(**SMALL), seed=7)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = NetworkConfig(**SMALL, bank_size=4)
        model = build_dca_unet(cfg, seed=3).eval()
        opt = torch.optim.Adam(model.parameters(), 1e-3)
        x = torch.randn(2, 3, 32, 32)
        out = model(x)
        out.logits_per_scale[0].sum().backward()
        opt.step()
        before = model(x)
        save_checkpoint(tmp_path / "m.ckpt", model, opt, iteration=17)
        loaded, payload = load_checkpoint(tmp_path / "m.ckpt")
        after = loaded.eval()(x)
        for a, b in zip(before.logits_per_scale + before.banks, after.logits_per_scale + after.banks):
            assert torch.equal(a, b)
        assert payload["iteration"] == 17
        assert payload["optimizer"]["state"]
        assert NetworkConfig(**payload["config"]) == cfg

    def test_header(self, tmp_path):
        model = build_baseline_unet(NetworkConfig(**SMALL))
        save_checkpoint(tmp_path / "m.ckpt", model)
        assert (tmp_path / "m.ckpt").read_bytes().startswith(CHECKPOINT_MAGIC)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\0" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(p)

    def test_bad_version(self, tmp_path):
        model = build_baseline_unet(NetworkConfig(**SMALL))
        save_checkpoint(tmp_path / "m.ckpt", model)
        blob = bytearray((tmp_path / "m.ckpt").read_bytes())
        blob[len(CHECKPOINT_MAGIC)] = 99
        (tmp_path / "v.ckpt").write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            read_checkpoint(tmp_path / "v.ckpt")

    def test_config_mismatch(self, tmp_path):
        model = build_dca_unet(NetworkConfig(**SMALL))
        save_checkpoint(tmp_path / "m.ckpt", model)
        with pytest.raises(CheckpointError, match="mismatch"):
            load_checkpoint(tmp_path / "m.ckpt", expected=NetworkConfig())
        load_checkpoint(tmp_path / "m.ckpt", expected=NetworkConfig(**SMALL))
