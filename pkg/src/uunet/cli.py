"""Command-line entry point: ``uunet run | compare | variants | synth``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import math
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import ConfigError, ExperimentConfig, load_config, save_config
from .data import PairedDataset, SyntheticTaskConfig, TASKS, load_paired_dir, make_synthetic, save_paired_dir
from .metrics import stability
from .topology import PRESETS, wire
from .trainer import Trainer, TrainingAborted, evaluate

log = logging.getLogger("uunet")

EXIT_OK, EXIT_CONFIG, EXIT_ABORTED = 0, 1, 2
RESULT_HEADER = ["model_name", "mse", "psnr", "ssim", "stability", "train_seconds"]
SEED_ENV = "UUNET_SEED"


def _apply_seed_override(cfg: ExperimentConfig) -> ExperimentConfig:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}: expected an integer, got {raw!r}") from None
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))


def build_datasets(cfg: ExperimentConfig):
    d = cfg.data
    if d.source == "synthetic":
        return make_synthetic(d.synthetic(cfg.image_size)), make_synthetic(d.synthetic(cfg.image_size, eval_split=True))
    try:
        train = load_paired_dir(d.path, "train", cfg.image_size, d.channels)
        test = load_paired_dir(d.path, "test", cfg.image_size, d.channels)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"data.path: {exc}") from None
    if cfg.train.batch_size > len(train):
        raise ConfigError(f"train.batch_size: {cfg.train.batch_size} exceeds the {len(train)} training pairs")
    return train, test


def build_trainer(cfg: ExperimentConfig) -> Trainer:
    model = wire(
        cfg.generator, cfg.discriminator, cfg.topology,
        image_size=cfg.image_size, latent_dim=cfg.latent_dim, conditional=cfg.conditional, seed=cfg.train.seed,
    )
    return Trainer(model, cfg.loss, cfg.train)


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_results(rows: Sequence[Sequence], path=None, stream=None) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_HEADER)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    if path is not None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
    if stream is not None:
        stream.write(text)


def run(config_path, resume: bool = False) -> int:
    try:
        cfg = _apply_seed_override(load_config(config_path))
        train_ds, eval_ds = build_datasets(cfg)
        trainer = build_trainer(cfg)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.pt"
    if resume and ckpt.exists():
        try:
            trainer.load_checkpoint(ckpt)
        except ValueError as exc:
            print(f"cannot resume: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        log.info("resumed from epoch %d", trainer.epoch)
    save_config(cfg, out / "config.toml")
    try:
        records = trainer.train(train_ds, checkpoint_path=ckpt, curve_path=out / "loss_curve.csv")
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    report = evaluate(trainer.model, eval_ds, cfg.train.batch_size)
    curve = [r.losses.total_g for r in records]
    stab = stability(curve).value if len(curve) > 1 else 0.0
    train_seconds = math.fsum(r.wall_time for r in records)
    write_results([[cfg.name, report.mse, report.psnr, report.ssim, stab, train_seconds]], out / "metrics.csv")
    print(f"{cfg.name}: mse={report.mse:.6g} psnr={report.psnr:.4f} ssim={report.ssim:.4f} stability={stab:.4f}")
    return EXIT_OK


def read_results(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def compare(run_dirs: Sequence, out=None, stream=None) -> List[list]:
    """Average metrics over runs sharing a model name; rows sorted by name.

    ``math.fsum`` keeps the averages independent of input order.
    """
    groups: Dict[str, Dict[str, List[float]]] = {}
    for d in run_dirs:
        path = Path(d) / "metrics.csv"
        if not path.is_file():
            log.warning("skipping %s: no metrics.csv", d)
            continue
        for row in read_results(path):
            cols = groups.setdefault(row["model_name"], {k: [] for k in RESULT_HEADER[1:]})
            for k in RESULT_HEADER[1:]:
                cols[k].append(float(row[k]))
    rows = [
        [name] + [math.fsum(cols[k]) / len(cols[k]) for k in RESULT_HEADER[1:]]
        for name, cols in sorted(groups.items())
    ]
    write_results(rows, out, stream)
    return rows


def format_variants() -> str:
    lines = []
    for name, topo in PRESETS.items():
        d = topo.as_dict()
        lines.append(name + "  " + " ".join(f"{k}={str(v).lower() if isinstance(v, bool) else v}" for k, v in d.items()))
    return "\n".join(lines) + "\n"


def synth(task: str, n: int, size: int, out, seed: int = 0, channels: int = 3) -> PairedDataset:
    ds = make_synthetic(SyntheticTaskConfig(task=task, n_samples=n, size=size, seed=seed, channels=channels))
    save_paired_dir(ds, out)
    return ds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uunet", description="Train and compare U-Net GAN variants with cross-network skips.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate one configuration")
    p.add_argument("config", help="TOML experiment config")
    p.add_argument("--resume", action="store_true", help="continue from output_dir/checkpoint.pt if present")

    p = sub.add_parser("compare", help="merge metrics.csv files from run directories")
    p.add_argument("run_dirs", nargs="*")
    p.add_argument("--out", help="also write the merged table here")

    sub.add_parser("variants", help="list topology presets")

    p = sub.add_parser("synth", help="write a synthetic paired dataset as A|B PNGs")
    p.add_argument("--task", choices=TASKS, default="invert")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return run(args.config, resume=args.resume)
    if args.command == "compare":
        compare(args.run_dirs, args.out, sys.stdout)
        return EXIT_OK
    if args.command == "variants":
        sys.stdout.write(format_variants())
        return EXIT_OK
    try:
        synth(args.task, args.n, args.size, args.out, args.seed, args.channels)
    except ValueError as exc:
        print(f"synth: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
