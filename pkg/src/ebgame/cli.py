"""Command-line pipeline: ingest / synth / train / score / eval / all.

Configuration is a flat ``key = value`` file; command-line flags override
file values and every run echoes the effective configuration to
``<out>/config.echo``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .beats import (DEFAULT_EXCLUDED, build_splits, load_split, save_split, synth_corpus,
                    write_manifest)
from .errors import ConfigError, EbGameError
from .evaluate import (confusion_metrics, read_scores, roc_curve, score_beats, select_threshold,
                       write_metrics, write_roc, write_scores)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train, write_history
from .wfdb import list_records, read_record

log = logging.getLogger("ebgame")


@dataclass
class RunConfig:
    data_dir: str = ""
    out_dir: str = "runs/default"
    seed: int = 0
    synthetic: bool = False
    # training
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_steps: int = 40
    weight_decay: float = 0.05
    mask_ratio: float = 0.3
    gamma_adv: float = 0.001
    gamma_con: float = 0.0
    disc_lr: float | None = None
    # model
    patch_size: int = 16
    embed_dim: int = 64
    enc_depth: int = 2
    dec_dim: int = 32
    dec_depth: int = 1
    disc_dim: int = 32
    disc_depth: int = 1
    num_heads: int = 4
    mlp_ratio: int = 2
    mask_sigma: float | None = None
    mask_sampling: str = "normal"
    # data
    pre_s: float = 0.3
    post_s: float = 0.4
    excluded: list[str] = field(default_factory=lambda: list(DEFAULT_EXCLUDED))
    test_n: int = 1000
    max_train: int | None = None
    synth_train: int = 512
    synth_test_normal: int = 200
    synth_test_anomalous: int = 200
    # scoring
    k_draws: int = 8
    threshold_quantile: float = 0.95

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.base_lr, self.warmup_steps,
                           self.weight_decay, self.mask_ratio, self.gamma_adv, self.gamma_con,
                           self.disc_lr, self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(patch_size=self.patch_size, embed_dim=self.embed_dim,
                           enc_depth=self.enc_depth, dec_dim=self.dec_dim, dec_depth=self.dec_depth,
                           disc_dim=self.disc_dim, disc_depth=self.disc_depth,
                           num_heads=self.num_heads, mlp_ratio=self.mlp_ratio,
                           mask_ratio=self.mask_ratio, mask_sigma=self.mask_sigma,
                           mask_sampling=self.mask_sampling)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if "None" in kind and raw.lower() in ("", "none"):
        return None
    if kind.startswith("list"):
        return [s.strip() for s in raw.split(",") if s.strip()]
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Resolve defaults, then the config file, then ``overrides`` (flags)."""
    values: dict = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _convert(key, raw)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value {raw!r} for {key} "
                                  f"(expected {_FIELD_TYPES[key]})") from None
    for key, val in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if val is not None:
            values[key] = val
    cfg = RunConfig(**values)
    cfg.train_config()
    cfg.model_config()
    return cfg


def echo_config(cfg: RunConfig) -> str:
    lines = [f"# ebgame {__version__}"]
    for key, val in sorted(dataclasses.asdict(cfg).items()):
        if isinstance(val, list):
            val = ",".join(val)
        lines.append(f"{key} = {'none' if val is None else val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_ingest(cfg: RunConfig) -> None:
    if not cfg.data_dir:
        raise ConfigError("ingest needs --data-dir")
    if not Path(cfg.data_dir).is_dir():
        raise ConfigError(f"data directory {cfg.data_dir} does not exist")
    names = list_records(cfg.data_dir)
    if not names:
        raise ConfigError(f"no WFDB records (.hea + .atr) found in {cfg.data_dir}")
    records = [read_record(cfg.data_dir, n) for n in names if n not in cfg.excluded]
    split = build_splits(records, cfg.excluded, cfg.seed, cfg.pre_s, cfg.post_s,
                         {"N": cfg.test_n}, cfg.max_train)
    _write_split(cfg, split)
    log.info("ingested %d records: %d train, %d test beats", len(records), len(split.train), len(split.test))


def run_synth(cfg: RunConfig) -> None:
    split = synth_corpus(cfg.seed, cfg.synth_train, cfg.synth_test_normal, cfg.synth_test_anomalous)
    _write_split(cfg, split)
    log.info("synthetic corpus: %d train, %d test beats", len(split.train), len(split.test))


def _write_split(cfg: RunConfig, split) -> None:
    out = _out(cfg)
    write_manifest(out / "manifest.csv", split)
    save_split(out / "splits" / "train.npz", split.train)
    save_split(out / "splits" / "test.npz", split.test)


def _ensure_splits(cfg: RunConfig) -> Path:
    out = _out(cfg)
    if not (out / "splits" / "train.npz").exists():
        if not cfg.synthetic:
            raise ConfigError(f"{out}/splits missing; run 'ingest' or 'synth' first")
        run_synth(cfg)
    return out


def run_train(cfg: RunConfig) -> None:
    out = _ensure_splits(cfg)
    images = load_split(out / "splits" / "train.npz")
    res = train(images, cfg.train_config(), cfg.model_config(), progress=True)
    save_checkpoint(out / "checkpoint.bin", res.generator, res.discriminator,
                    {"gamma_con": cfg.gamma_con, "seed": cfg.seed})
    write_history(out / "loss_history.csv", res.history)


def run_score(cfg: RunConfig) -> None:
    out = _out(cfg)
    gen, _, extra = load_checkpoint(out / "checkpoint.bin")
    gamma_con = extra.get("gamma_con", cfg.gamma_con)
    for name, fname in (("test", "scores.csv"), ("train", "train_scores.csv")):
        images = load_split(out / "splits" / f"{name}.npz")
        scored = score_beats(images, gen, cfg.k_draws, cfg.seed, gamma_con)
        write_scores(out / fname, scored)


def run_eval(cfg: RunConfig) -> None:
    out = _out(cfg)
    test = read_scores(out / "scores.csv")
    train_scores = [s.score for s in read_scores(out / "train_scores.csv")]
    threshold = select_threshold(train_scores, cfg.threshold_quantile)
    report = confusion_metrics(test, threshold)
    write_metrics(out / "metrics.txt", report)
    write_roc(out / "roc.csv", *roc_curve(test))
    log.info("AUROC %s  accuracy %.4f  sensitivity %.4f  specificity %.4f  F1 %.4f",
             report.auroc, report.accuracy, report.sensitivity, report.specificity, report.f1)


def run_all(cfg: RunConfig) -> None:
    if cfg.synthetic:
        run_synth(cfg)
    else:
        run_ingest(cfg)
    run_train(cfg)
    run_score(cfg)
    run_eval(cfg)


COMMANDS = {"ingest": run_ingest, "synth": run_synth, "train": run_train,
            "score": run_score, "eval": run_eval, "all": run_all}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--data-dir", metavar="PATH")
    common.add_argument("--out", metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--synthetic", action="store_true", default=None)
    common.add_argument("--mask-ratio", type=float)
    common.add_argument("--patch-size", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--k-draws", type=int)
    common.add_argument("-q", "--quiet", action="store_true")
    parser = argparse.ArgumentParser(prog="ebgame", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ebgame {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {"ingest": "build beat images from a MIT-BIH directory",
             "synth": "build a synthetic beat corpus",
             "train": "train generator and discriminator",
             "score": "score train and test beats with a checkpoint",
             "eval": "threshold scores and compute metrics",
             "all": "run the whole pipeline"}
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "ingest" and not args.data_dir and not args.config:
        parser.error("ingest requires --data-dir")
    overrides = {"data_dir": args.data_dir, "out_dir": args.out, "seed": args.seed,
                 "synthetic": args.synthetic, "mask_ratio": args.mask_ratio,
                 "patch_size": args.patch_size, "epochs": args.epochs, "k_draws": args.k_draws}
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"ebgame: {exc}", file=sys.stderr)
        return 2
    if args.command in ("ingest",) or (args.command == "all" and not cfg.synthetic):
        if not cfg.data_dir:
            print("ebgame: a data directory is required (--data-dir) unless --synthetic", file=sys.stderr)
            return 2
    try:
        out = _out(cfg)
        (out / "config.echo").write_text(echo_config(cfg))
        COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"ebgame: {exc}", file=sys.stderr)
        return 2
    except (EbGameError, OSError, FloatingPointError) as exc:
        print(f"ebgame: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
