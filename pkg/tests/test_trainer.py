import math

import numpy as np
import pytest
import torch

from dcanet.data import DEFAULT_STYLES, DomainRegistry, Split, SplitSpec, Volume, generate_synthetic_domain, \
    leave_one_domain_out_split
from dcanet.dca import DCABlock
from dcanet.errors import ConfigError, NumericalError
from dcanet.metrics import CSV_COLUMNS, read_results_csv, read_summary_csv
from dcanet.network import NetworkConfig, load_checkpoint
from dcanet.trainer import (
    BatchSampler,
    TrainConfig,
    child_seeds,
    read_trainlog,
    run_lodo_experiment,
    train,
)

TINY = NetworkConfig(encoder_widths=(8, 16, 32, 64, 128))


def _registry(n_domains=3, n_volumes=3, size=32, depth=4):
    styles = list(DEFAULT_STYLES.items())[:n_domains]
    return DomainRegistry(
        [generate_synthetic_domain(d, s, n_volumes, size=size, depth=depth, seed=10 + k) for k, (d, s) in
         enumerate(styles)]
    )


def _quick(mode="dca", iterations=10, **kw):
    return TrainConfig(iterations=iterations, mode=mode, target_size=32, val_every=5, **kw)


@pytest.fixture(scope="module")
def split():
    return leave_one_domain_out_split(_registry(), SplitSpec("C"))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.iterations, c.batch_size, c.N, c.lambda1, c.lambda2) == (5e-4, 20000, 4, 8, 1.0, 0.1)
        assert c.adam_betas == (0.9, 0.999) and c.weight_decay == 0.0 and c.grad_clip is None

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(iterations=0), dict(mode="bogus"), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_mode_lambdas(self):
        lam = {m: TrainConfig(mode=m).effective_lambdas() for m in ("dca", "dca_no_div", "deepall", "deepall_comp")}
        assert lam == {"dca": (1.0, 0.1), "dca_no_div": (1.0, 0.0), "deepall": (0.0, 0.0),
                       "deepall_comp": (1.0, 0.0)}


def test_child_seeds():
    a = child_seeds(3)
    assert a == child_seeds(3) and len(set(a)) == 4
    assert a != child_seeds(4)


class TestBatchSampler:
    def test_epoch_covers_everything(self):
        doms = np.array(["a"] * 6 + ["b"] * 6)
        s = BatchSampler(doms, 4, seed=0)
        seen = np.concatenate([s.next() for _ in range(3)])
        assert sorted(seen.tolist()) == list(range(12))

    def test_balanced(self):
        doms = np.array(["a"] * 90 + ["b"] * 10)
        s = BatchSampler(doms, 4, seed=0, domain_balanced=True)
        picks = np.concatenate([s.next() for _ in range(500)])
        frac_b = np.mean(doms[picks] == "b")
        assert abs(frac_b - 0.5) < 0.05

    def test_seeded(self):
        doms = np.array(["a"] * 10)
        a, b = BatchSampler(doms, 3, 5), BatchSampler(doms, 3, 5)
        assert all(np.array_equal(a.next(), b.next()) for _ in range(8))


class TestTrain:
    def test_first_ten_losses_bit_identical(self, split):
        _, a = train(split, _quick(), TINY)
        _, b = train(split, _quick(), TINY)
        assert [r["l_total"] for r in a.losses] == [r["l_total"] for r in b.losses]
        assert len(a.losses) == 10
        _, c = train(split, _quick(seed=1), TINY)
        assert [r["l_total"] for r in a.losses] != [r["l_total"] for r in c.losses]

    def test_worker_count_keeps_order(self, split, monkeypatch):
        _, a = train(split, _quick(iterations=3), TINY)
        monkeypatch.setenv("DCA_NUM_WORKERS", "3")
        _, b = train(split, _quick(iterations=3), TINY)
        assert a.losses == b.losses

    def test_no_div_mode_logs_but_ignores_div(self, split):
        _, tlog = train(split, _quick("dca_no_div", iterations=4), TINY)
        for r in tlog.losses:
            assert r["l_div"] != 0.0
            assert r["l_total"] == pytest.approx(r["l_seg"] + 1.0 * r["l_comp"], rel=1e-6)

    def test_dca_mode_weights_div(self, split):
        _, tlog = train(split, _quick("dca", iterations=4), TINY)
        for r in tlog.losses:
            assert r["l_total"] == pytest.approx(r["l_seg"] + r["l_comp"] + 0.1 * r["l_div"], rel=1e-6)

    def test_deepall_has_no_dca(self, split):
        model, tlog = train(split, _quick("deepall", iterations=2), TINY)
        assert not any(isinstance(m, DCABlock) for m in model.modules())
        assert not any(".dca." in k for k in model.state_dict())
        assert all(r["l_total"] == r["l_seg"] for r in tlog.losses)

    def test_deepall_comp(self, split):
        model, tlog = train(split, _quick("deepall_comp", iterations=2), TINY)
        assert model.dca_blocks == []
        assert all(r["l_total"] == pytest.approx(r["l_seg"] + r["l_comp"], rel=1e-6) for r in tlog.losses)

    def test_bank_size_from_config(self, split):
        model, _ = train(split, _quick(iterations=1, N=5), TINY)
        assert all(b.bank_size == 5 for b in model.dca_blocks)

    def test_best_checkpoint_and_log(self, split, tmp_path):
        model, tlog = train(split, _quick(iterations=10), TINY, out_dir=tmp_path)
        assert [v["iteration"] for v in tlog.validations] == [5, 10]
        best = max(tlog.validations, key=lambda v: v["val_dice"])
        assert tlog.best_iteration == best["iteration"] and tlog.best_val_dice == best["val_dice"]
        loaded, payload = load_checkpoint(tmp_path / "best.ckpt")
        assert payload["iteration"] == tlog.best_iteration
        x = torch.randn(2, 3, 32, 32)
        a, b = model(x), loaded.eval()(x)
        assert all(torch.equal(p, q) for p, q in zip(a.logits_per_scale, b.logits_per_scale))
        back = read_trainlog(tmp_path / "trainlog.jsonl")
        assert back.losses == tlog.losses and back.validations == tlog.validations
        assert back.optimizer["betas"] == [0.9, 0.999] and back.optimizer["weight_decay"] == 0.0
        its = [r["iteration"] for r in back.losses]
        assert its == sorted(its) == list(range(1, 11))

    def test_nan_guard(self, split, tmp_path):
        bad = Volume(np.full((4, 32, 32), np.nan, np.float32), np.zeros((4, 32, 32), np.uint8), (1, 1, 1), "nan0")
        broken = Split([bad], ["Z"], [], [], "Z", ["Z"])
        with pytest.raises(NumericalError, match="iteration 1"):
            train(broken, _quick(iterations=2), TINY, out_dir=tmp_path)
        dump = np.load(tmp_path / "nan_batch_1.npz")
        assert set(dump.files) == {"images", "labels", "ids"}

    def test_losses_finite_at_defaults(self, split):
        for seed in range(3):
            _, tlog = train(split, _quick(iterations=20, seed=seed), TINY)
            assert all(math.isfinite(v) for r in tlog.losses for v in r.values())


def test_overfit_single_domain():
    # calibrated once: default widths, default hyperparameters, seed 0
    ds = generate_synthetic_domain("A", DEFAULT_STYLES["A"], 4, seed=0)
    split = Split(ds.volumes, ["A"], [], [], "A", ["A"] * 4)
    _, tlog = train(split, TrainConfig(iterations=200, seed=0, val_every=0), NetworkConfig())
    tail = np.mean([r["l_seg"] for r in tlog.losses[-20:]])
    assert tail < 0.2, tail


class TestLodo:
    def test_rows_and_files(self, tmp_path):
        reg = _registry()
        res = run_lodo_experiment(reg, _quick(iterations=3), TINY, out_dir=tmp_path)
        assert [r["domain"] for r in res.summary] == ["A", "B", "C", "average"]
        assert set(res.logs) == {"A", "B", "C"}
        # each held-out domain has 3 patients: 1 val, 2 test
        assert len(res.results) == 6
        rows = read_results_csv(tmp_path / "results.csv")
        assert rows == res.results
        assert (tmp_path / "results.csv").read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
        assert len(read_summary_csv(tmp_path / "summary.csv")) == 4
        for dom in "ABC":
            assert (tmp_path / f"heldout_{dom}" / "best.ckpt").exists()

    def test_rerun_identical_tables(self, tmp_path):
        reg = _registry()
        run_lodo_experiment(reg, _quick(iterations=3), TINY, out_dir=tmp_path / "a")
        run_lodo_experiment(reg, _quick(iterations=3), TINY, out_dir=tmp_path / "b")
        for name in ("results.csv", "summary.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_needs_two_domains(self):
        with pytest.raises(ConfigError):
            run_lodo_experiment(_registry(1), _quick(), TINY)
