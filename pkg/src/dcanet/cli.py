"""Command-line entry point: synth | train | eval | plot.

Every command reads one structured config (TOML, or JSON by extension) with
sections [data], [network], [loss], [train], [eval] and a top-level root
``seed``. The config text is echoed verbatim into the output directory next
to ``resolved_config.json``, which also records command-line overrides.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .data import (
    DEFAULT_STYLES,
    DomainRegistry,
    DomainStyle,
    SplitSpec,
    generate_synthetic_registry,
    leave_one_domain_out_split,
    load_multisite_volumes,
    load_synthetic_registry,
    save_domain,
)
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .losses import LossConfig
from .metrics import (
    ASD_CONVENTION,
    aggregate,
    evaluate_volume,
    format_summary,
    write_results_csv,
    write_summary_csv,
)
from .network import NetworkConfig, load_checkpoint
from .trainer import MODES, TrainConfig, numeric_mode, read_trainlog, run_lodo_experiment, train

log = logging.getLogger("dcanet")

SECTIONS = ("data", "network", "loss", "train", "eval")
TOP_LEVEL = ("seed",)
# keys owned elsewhere: bank size and DCA on/off come from [train] N / mode, the seed is top-level
RESERVED = {"network": {"bank_size": "[train] N", "use_dca": "[train] mode"},
            "loss": {"lambda1": "[train] lambda1", "lambda2": "[train] lambda2"},
            "train": {"seed": "top-level seed"}}


@dataclass
class DataConfig:
    source: str = "synthetic"
    root: str = "runs/synth"
    manifest: str = ""
    domains: tuple[str, ...] = ("A", "B", "C", "D")
    n_volumes: int = 10
    size: int = 64
    depth: int = 12
    held_out: str = "D"
    styles: dict = field(default_factory=dict)

    def __post_init__(self):
        self.domains = tuple(str(d) for d in self.domains)
        if self.source not in ("synthetic", "nifti"):
            raise ConfigError(f"[data] source must be 'synthetic' or 'nifti', got {self.source!r}")
        if self.source == "nifti" and not self.manifest:
            raise ConfigError("[data] source 'nifti' needs a manifest path")
        if len(set(self.domains)) != len(self.domains):
            raise ConfigError(f"[data] duplicate domain ids {list(self.domains)}")

    def style(self, domain_id: str) -> DomainStyle:
        if domain_id in self.styles:
            try:
                return DomainStyle(**self.styles[domain_id])
            except TypeError as exc:
                raise ConfigError(f"[data.styles.{domain_id}]: {exc}") from exc
        if domain_id in DEFAULT_STYLES:
            return DEFAULT_STYLES[domain_id]
        raise ConfigError(f"[data] domain {domain_id!r} has no style; add [data.styles.{domain_id}]")


@dataclass
class EvalConfig:
    split: str = "test"
    batch_size: int = 16
    slices: int = 4

    def __post_init__(self):
        if self.split not in ("test", "val", "all"):
            raise ConfigError(f"[eval] split must be test, val or all, got {self.split!r}")
        if self.batch_size < 1 or self.slices < 1:
            raise ConfigError("[eval] batch_size and slices must be >= 1")


@dataclass
class ExperimentConfig:
    data: DataConfig
    network: NetworkConfig
    loss: LossConfig
    train: TrainConfig
    eval: EvalConfig
    seed: int = 0
    text: str = ""  # verbatim source
    suffix: str = ".toml"
    present: tuple[str, ...] = SECTIONS

    def require(self, *sections):
        missing = [s for s in sections if s not in self.present]
        if missing:
            raise ConfigError(f"config is missing required section(s): {', '.join(f'[{s}]' for s in missing)}")

    def expected_network(self) -> NetworkConfig:
        return replace(self.network, bank_size=self.train.N, use_dca=self.train.uses_dca)

    def resolved(self) -> dict:
        return {
            "seed": self.seed,
            "data": asdict(self.data),
            "network": self.expected_network().to_dict(),
            "loss": asdict(self.loss),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
        }


def _build(cls, section: str, values: dict, **fixed):
    allowed = {f.name for f in fields(cls)} - set(fixed) - set(RESERVED.get(section, {}))
    for key in values:
        if key in RESERVED.get(section, {}):
            raise ConfigError(f"[{section}] key {key!r} is not allowed here; set {RESERVED[section][key]} instead")
        if key not in allowed:
            raise ConfigError(f"[{section}] unknown key {key!r}; allowed: {sorted(allowed)}")
    try:
        return cls(**values, **fixed)
    except (ConfigError, DataError):
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str, suffix: str = ".toml") -> ExperimentConfig:
    try:
        doc = json.loads(text) if suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    unknown = set(doc) - set(SECTIONS) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}; sections are {list(SECTIONS)}")
    for s in SECTIONS:
        if s in doc and not isinstance(doc[s], dict):
            raise ConfigError(f"[{s}] must be a table")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    train_cfg = _build(TrainConfig, "train", doc.get("train", {}), seed=seed)
    return ExperimentConfig(
        data=_build(DataConfig, "data", doc.get("data", {})),
        network=_build(NetworkConfig, "network", doc.get("network", {})),
        loss=_build(LossConfig, "loss", doc.get("loss", {}), lambda1=train_cfg.lambda1, lambda2=train_cfg.lambda2),
        train=train_cfg,
        eval=_build(EvalConfig, "eval", doc.get("eval", {})),
        seed=seed,
        text=text,
        suffix=suffix,
        present=tuple(s for s in SECTIONS if s in doc),
    )


def default_config_text() -> str:
    return resources.files("dcanet").joinpath("default.toml").read_text()


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return parse_config(default_config_text(), ".toml")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, ".json" if path.suffix.lower() == ".json" else ".toml")


def apply_overrides(cfg: ExperimentConfig, seed=None, mode=None, bank_size=None) -> ExperimentConfig:
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"--seed must be nonnegative, got {seed}")
        cfg.seed = seed
        cfg.train = replace(cfg.train, seed=seed)
    if mode is not None:
        cfg.train = replace(cfg.train, mode=mode)
    if bank_size is not None:
        cfg.train = replace(cfg.train, N=bank_size)
        # revalidate against the network widths
        try:
            cfg.expected_network()
        except ConfigError as exc:
            raise ConfigError(f"--bank-size {bank_size}: {exc}") from exc
    return cfg


def prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(cfg: ExperimentConfig, out: Path, command: str) -> None:
    (out / f"config{cfg.suffix}").write_text(cfg.text)
    resolved = {"command": command, **cfg.resolved()}
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=list) + "\n")


def load_registry(data: DataConfig) -> DomainRegistry:
    if data.source == "nifti":
        return load_multisite_volumes(data.root, data.manifest)
    reg = load_synthetic_registry(data.root)
    missing = [d for d in data.domains if d not in reg.domain_ids]
    if missing:
        raise DataError(f"domains {missing} not found under {data.root} (have {reg.domain_ids})")
    return DomainRegistry([reg[d] for d in data.domains])


def _split(registry: DomainRegistry, held_out: str, seed: int):
    try:
        return leave_one_domain_out_split(registry, SplitSpec(held_out, seed=seed))
    except KeyError as exc:
        raise ConfigError(f"[data] held_out: {exc.args[0]}") from exc


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: ExperimentConfig, out, force=False) -> Path:
    cfg.require("data")
    d = cfg.data
    styles = {dom: d.style(dom) for dom in d.domains}
    out = prepare_out(out, force)
    for ds in generate_synthetic_registry(styles, d.n_volumes, d.size, d.depth, cfg.seed).domains:
        save_domain(ds, out)
    echo_config(cfg, out, "synth")
    print(f"wrote {len(d.domains)} domains x {d.n_volumes} volumes to {out}")
    return out


def cmd_train(cfg: ExperimentConfig, out, force=False, lodo=False):
    cfg.require("data", "network", "loss", "train")
    registry = load_registry(cfg.data)
    net = replace(cfg.network, use_dca=cfg.train.uses_dca)
    out = prepare_out(out, force)
    echo_config(cfg, out, "train --lodo" if lodo else "train")
    if lodo:
        res = run_lodo_experiment(registry, cfg.train, net, cfg.loss, out)
        print(format_summary(res.summary))
        return res.summary
    split = _split(registry, cfg.data.held_out, cfg.seed)
    model, tlog = train(split, cfg.train, net, cfg.loss, out)
    with numeric_mode(cfg.train.single_threaded):
        results = [evaluate_volume(model, v, split.held_out_domain, cfg.train.target_size) for v in split.test]
    summary = aggregate(results)
    write_results_csv(results, out / "results.csv")
    write_summary_csv(summary, out / "summary.csv", ASD_CONVENTION)
    print(f"best val Dice {tlog.best_val_dice} at iteration {tlog.best_iteration}; checkpoint {tlog.checkpoint}")
    print(format_summary(summary))
    return summary


def _eval_volumes(cfg: ExperimentConfig, registry: DomainRegistry):
    if cfg.eval.split == "all":
        return [(d.domain_id, v) for d in registry.domains for v in d.volumes]
    split = _split(registry, cfg.data.held_out, cfg.seed)
    vols = split.test if cfg.eval.split == "test" else split.val
    return [(split.held_out_domain, v) for v in vols]


def cmd_eval(cfg: ExperimentConfig, checkpoint, out, force=False):
    cfg.require("data", "network", "train", "eval")
    model, _ = load_checkpoint(checkpoint, cfg.expected_network())
    registry = load_registry(cfg.data)
    out = prepare_out(out, force)
    echo_config(cfg, out, "eval")
    with numeric_mode(cfg.train.single_threaded):
        results = [evaluate_volume(model, v, dom, cfg.train.target_size, batch_size=cfg.eval.batch_size)
                   for dom, v in _eval_volumes(cfg, registry)]
    if not results:
        raise DataError(f"split {cfg.eval.split!r} selects no volumes")
    summary = aggregate(results)
    write_results_csv(results, out / "results.csv")
    write_summary_csv(summary, out / "summary.csv", ASD_CONVENTION)
    print(format_summary(summary))
    return summary


def cmd_plot(cfg: ExperimentConfig, run_dir, out, force=False, slices=None) -> list[Path]:
    from .plotting import plot_curves, render_overlays

    cfg.require("data", "train", "eval")
    run_dir = Path(run_dir)
    logs = sorted(run_dir.rglob("trainlog.jsonl")) if run_dir.is_dir() else []
    if not logs:
        raise DataError(f"no training results (trainlog.jsonl) under {run_dir}")
    n = slices or cfg.eval.slices
    out = prepare_out(out, force)
    echo_config(cfg, out, "plot")
    written = []
    for p in logs:
        tag = "_".join(p.parent.relative_to(run_dir).parts) or "run"
        dest = out / f"curves_{tag}.png"
        plot_curves(read_trainlog(p), dest, tag)
        written.append(dest)
    ckpts = sorted(run_dir.rglob("best.ckpt"))
    registry = load_registry(cfg.data) if ckpts else None
    for ck in ckpts:
        fold = ck.parent.name
        held = fold[len("heldout_"):] if fold.startswith("heldout_") else cfg.data.held_out
        split = _split(registry, held, cfg.seed)
        model, _ = load_checkpoint(ck)
        prefix = f"{fold}_" if fold.startswith("heldout_") else ""
        written += render_overlays(model, split.test[0], out, n, cfg.train.target_size, prefix)
    print(f"wrote {len(written)} PNG files to {out}")
    return written


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are config errors (exit 1), keeping 2 for data errors
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcanet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", type=Path, help="TOML or JSON experiment config (default: built-in)")
        p.add_argument("--out", type=Path, required=True, help=out_help)
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    def model_flags(p):
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--bank-size", type=int, dest="bank_size", help="number of preceptors N")

    p = sub.add_parser("synth", help="generate synthetic styled domains")
    common(p, "dataset directory")
    p = sub.add_parser("train", help="train one held-out split or a full leave-one-domain-out sweep")
    common(p, "run directory")
    model_flags(p)
    p.add_argument("--lodo", action="store_true", help="hold out every domain in turn")
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, "evaluation directory")
    model_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("test", "val", "all"), help="overrides [eval] split")
    p = sub.add_parser("plot", help="render training curves and slice overlays")
    common(p, "figure directory")
    p.add_argument("--run", type=Path, required=True, help="train run directory")
    p.add_argument("--slices", type=int, help="overlay slices per checkpoint (overrides [eval] slices)")
    return parser


def run(args) -> None:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args.seed, getattr(args, "mode", None), getattr(args, "bank_size", None))
    if args.command == "synth":
        cmd_synth(cfg, args.out, args.force)
    elif args.command == "train":
        cmd_train(cfg, args.out, args.force, args.lodo)
    elif args.command == "eval":
        if args.split:
            cfg.eval = replace(cfg.eval, split=args.split)
        cmd_eval(cfg, args.checkpoint, args.out, args.force)
    elif args.command == "plot":
        if args.slices is not None and args.slices < 1:
            raise ConfigError("--slices must be >= 1")
        cmd_plot(cfg, args.run, args.out, args.force, args.slices)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        run(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
