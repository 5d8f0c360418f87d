"""Training loop, ablation modes and the leave-one-domain-out experiment runner."""
from __future__ import annotations

import contextlib
import copy
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import (
    DomainRegistry,
    Split,
    SplitSpec,
    leave_one_domain_out_split,
    make_slice_triples,
    num_workers_from_env,
    preprocess_volume,
)
from .errors import ConfigError, NumericalError
from .losses import LossConfig, total_loss
from .metrics import (
    ASD_CONVENTION,
    EvalResult,
    aggregate,
    evaluate_volume,
    write_results_csv,
    write_summary_csv,
)
from .network import NetworkConfig, build_baseline_unet, build_dca_unet, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("dca", "dca_no_div", "deepall", "deepall_comp")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    iterations: int = 20000
    batch_size: int = 4
    N: int = 8
    lambda1: float = 1.0
    lambda2: float = 0.1
    seed: int = 0
    val_every: int = 500
    mode: str = "dca"
    target_size: int = 64
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    grad_clip: float | None = None
    domain_balanced: bool = False
    single_threaded: bool = True

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")

    @property
    def uses_dca(self) -> bool:
        return self.mode in ("dca", "dca_no_div")

    def effective_lambdas(self) -> tuple[float, float]:
        """(lambda1, lambda2) actually applied in the total loss for this mode."""
        return {
            "dca": (self.lambda1, self.lambda2),
            "dca_no_div": (self.lambda1, 0.0),
            "deepall": (0.0, 0.0),
            "deepall_comp": (self.lambda1, 0.0),
        }[self.mode]


@dataclass
class TrainLog:
    losses: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    best_iteration: int | None = None
    best_val_dice: float | None = None
    checkpoint: str | None = None
    optimizer: dict = field(default_factory=dict)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "meta", "optimizer": self.optimizer}) + "\n")
            for row in self.losses:
                fh.write(json.dumps({"type": "loss", **row}) + "\n")
            for row in self.validations:
                fh.write(json.dumps({"type": "val", **row}) + "\n")
            fh.write(json.dumps({"type": "summary", "wall_clock": self.wall_clock,
                                 "best_iteration": self.best_iteration, "best_val_dice": self.best_val_dice,
                                 "checkpoint": self.checkpoint}) + "\n")


def read_trainlog(path) -> TrainLog:
    tl = TrainLog()
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            kind = row.pop("type")
            if kind == "loss":
                tl.losses.append(row)
            elif kind == "val":
                tl.validations.append(row)
            elif kind == "meta":
                tl.optimizer = row["optimizer"]
            elif kind == "summary":
                tl.wall_clock = row["wall_clock"]
                tl.best_iteration = row["best_iteration"]
                tl.best_val_dice = row["best_val_dice"]
                tl.checkpoint = row["checkpoint"]
    return tl


@contextlib.contextmanager
def numeric_mode(single_threaded: bool):
    """Single thread + deterministic kernels for bit-reproducible runs."""
    if not single_threaded:
        yield
        return
    threads = torch.get_num_threads()
    det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(det)


def child_seeds(root_seed: int, n: int = 4) -> list[int]:
    """Independent per-consumer seeds derived from one root seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(root_seed).spawn(n)]


def build_model(config: TrainConfig, net_config: NetworkConfig, seed: int):
    net_config = replace(net_config, bank_size=config.N)
    if config.uses_dca:
        return build_dca_unet(replace(net_config, use_dca=True), seed)
    return build_baseline_unet(net_config, seed)


def _stack_samples(volumes, domains, target_size):
    workers = num_workers_from_env()
    prep = lambda v: preprocess_volume(v, target_size)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            prepped = list(ex.map(prep, volumes))
    else:
        prepped = [prep(v) for v in volumes]
    images, labels, doms = [], [], []
    for v, d in zip(prepped, domains):
        for s in make_slice_triples(v, d):
            images.append(s.image)
            labels.append(s.label)
            doms.append(d)
    return np.stack(images).astype(np.float32), np.stack(labels).astype(np.int64), np.asarray(doms)


class BatchSampler:
    """Seeded batch order: epoch-wise permutations, or uniform-domain draws when balanced."""

    def __init__(self, domains: np.ndarray, batch_size: int, seed: int, domain_balanced: bool = False):
        self.rng = np.random.default_rng(seed)
        self.batch_size = batch_size
        self.n = len(domains)
        self.balanced = domain_balanced
        self.by_domain = [np.flatnonzero(domains == d) for d in dict.fromkeys(domains.tolist())]
        self._perm = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        if self.balanced:
            picks = self.rng.integers(len(self.by_domain), size=self.batch_size)
            return np.array([self.rng.choice(self.by_domain[p]) for p in picks])
        while len(self._perm) < self.batch_size:
            self._perm = np.concatenate([self._perm, self.rng.permutation(self.n)])
        out, self._perm = self._perm[: self.batch_size], self._perm[self.batch_size :]
        return out


def validate(model, volumes, domain_id: str, target_size: int) -> float:
    if not volumes:
        return float("nan")
    return float(np.mean([evaluate_volume(model, v, domain_id, target_size).dice_percent for v in volumes]))


def train(
    split: Split,
    config: TrainConfig,
    net_config: NetworkConfig | None = None,
    loss_config: LossConfig | None = None,
    out_dir=None,
):
    """Optimize a fresh model on ``split.train``; returns (model with best-validation weights, TrainLog)."""
    net_config = net_config or NetworkConfig()
    l1, l2 = config.effective_lambdas()
    loss_config = replace(loss_config or LossConfig(), lambda1=l1, lambda2=l2)
    init_seed, triple_seed, batch_seed, _ = child_seeds(config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    with numeric_mode(config.single_threaded):
        t0 = time.perf_counter()
        model = build_model(config, net_config, init_seed)
        doms = split.train_volume_domains or ["train"] * len(split.train)
        images, labels, sample_domains = _stack_samples(split.train, doms, config.target_size)
        sampler = BatchSampler(sample_domains, config.batch_size, batch_seed, config.domain_balanced)
        triple_rng = np.random.default_rng(triple_seed)
        opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.adam_betas,
                               weight_decay=config.weight_decay)
        tlog = TrainLog(optimizer={"name": "Adam", "lr": config.lr, "betas": list(config.adam_betas),
                                   "weight_decay": config.weight_decay, "schedule": "constant",
                                   "grad_clip": config.grad_clip})
        best_state, best_dice, best_it = None, -1.0, None
        model.train()
        for it in range(1, config.iterations + 1):
            idx = sampler.next()
            x = torch.from_numpy(images[idx])
            y = torch.from_numpy(labels[idx])
            out = model(x)
            lb = total_loss(out.logits_per_scale, y, out.banks, loss_config, triple_rng,
                            require_banks=config.uses_dca)
            if not torch.isfinite(lb.l_total):
                msg = f"non-finite loss at iteration {it} (batch sample ids {idx.tolist()}): {lb.as_floats()}"
                if out_dir is not None:
                    np.savez(out_dir / f"nan_batch_{it}.npz", images=images[idx], labels=labels[idx], ids=idx)
                raise NumericalError(msg)
            opt.zero_grad(set_to_none=True)
            lb.l_total.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            tlog.losses.append({"iteration": it, **lb.as_floats()})

            if (config.val_every and it % config.val_every == 0) or it == config.iterations:
                if split.val:
                    vd = validate(model, split.val, split.held_out_domain, config.target_size)
                    tlog.validations.append({"iteration": it, "val_dice": vd})
                    log.info("iter %d  loss %.4f  val dice %.2f", it, lb.as_floats()["l_total"], vd)
                    if vd > best_dice:
                        best_dice, best_it = vd, it
                        best_state = copy.deepcopy(model.state_dict())
        if best_state is None:
            best_it = config.iterations
        else:
            model.load_state_dict(best_state)
        tlog.best_iteration = best_it
        tlog.best_val_dice = best_dice if best_state is not None else None
        tlog.wall_clock = time.perf_counter() - t0

    if out_dir is not None:
        ckpt = out_dir / "best.ckpt"
        save_checkpoint(ckpt, model, opt, best_it, extra={"train_config": asdict(config)})
        tlog.checkpoint = str(ckpt)
        tlog.write_jsonl(out_dir / "trainlog.jsonl")
    model.eval()
    return model, tlog


@dataclass
class LodoResult:
    results: list[EvalResult]
    summary: list[dict]
    logs: dict[str, TrainLog]


def run_lodo_experiment(
    registry: DomainRegistry,
    config: TrainConfig,
    net_config: NetworkConfig | None = None,
    loss_config: LossConfig | None = None,
    out_dir=None,
) -> LodoResult:
    """Hold out each domain in turn, train a fresh model, evaluate on its test split."""
    if registry.M < 2:
        raise ConfigError("leave-one-domain-out needs at least 2 domains")
    out_dir = Path(out_dir) if out_dir is not None else None
    results, logs = [], {}
    for dom in registry.domain_ids:
        split = leave_one_domain_out_split(registry, SplitSpec(dom, seed=config.seed))
        fold_dir = out_dir / f"heldout_{dom}" if out_dir is not None else None
        model, tlog = train(split, config, net_config, loss_config, fold_dir)
        with numeric_mode(config.single_threaded):
            fold = [evaluate_volume(model, v, dom, config.target_size) for v in split.test]
        results.extend(fold)
        logs[dom] = tlog
        log.info("held out %s: mean test dice %.2f", dom, np.mean([r.dice_percent for r in fold]))
    summary = aggregate(results)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_results_csv(results, out_dir / "results.csv")
        write_summary_csv(summary, out_dir / "summary.csv", ASD_CONVENTION)
    return LodoResult(results, summary, logs)
