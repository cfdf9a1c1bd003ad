"""Command-line entry point: ``bevscan gen|train|eval|export``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .geometry import write_xyz
from .metrics import MetricsReport, evaluate, predict_probability
from .model import BevSegNet
from .synthscene import build_bank, write_pgm, write_ppm
from .tensor import CheckpointError
from .training import Trainer, load_into

log = logging.getLogger("bevscan")


def _out_dir(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bank(cfg: RunConfig, split: str, size: int):
    g = cfg.grid
    return build_bank(split, size, g, (cfg.modality,), cfg.model_config().rig(), base_seed=0,
                      n_vehicles_range=(cfg.vehicles_min, cfg.vehicles_max))[cfg.modality]


def _load_model(cfg: RunConfig, checkpoint: str | None) -> BevSegNet:
    if not checkpoint:
        raise FileNotFoundError("this command needs --checkpoint")
    if not Path(checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model = BevSegNet(cfg.model_config())
    load_into(model, checkpoint)
    return model


def cmd_gen(cfg: RunConfig, out: Path, n_export: int = 4) -> int:
    """Write a manifest of the train and val splits plus plain-file exports of
    the first ``n_export`` validation scenes."""
    rows = []
    for split, size in (("train", cfg.n_train), ("val", cfg.val_size)):
        for i, sample in enumerate(_bank(cfg, split, size)):
            t = sample.targets
            rows.append({"split": split, "index": i, "seed": sample.scene.seed,
                         "n_vehicles": t.n_instances, "n_visible": int(t.visibility.sum()),
                         "n_points": len(sample.rendered.points), "seg_cells": int(t.seg.sum())})
            if split == "val" and i < n_export:
                _export_sample(out / "samples" / f"val_{i:04d}", sample)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    cfg.write(out / "resolved_config.txt")
    log.info("wrote %d manifest rows to %s", len(rows), out / "manifest.csv")
    return 0


def _export_sample(d: Path, sample, pred: np.ndarray | None = None) -> None:
    d.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(sample.rendered.images):
        write_ppm(d / f"cam{k}.ppm", np.asarray(img) / (255.0 if img.dtype == np.uint8 else 1.0))
    write_xyz(d / "points.xyz", sample.rendered.points)
    # row 0 of a BEV map is the nearest-z edge; flip so "forward" is up in the picture
    write_pgm(d / "gt_seg.pgm", sample.targets.seg[0][::-1])
    write_pgm(d / "gt_seg_visible.pgm", sample.targets.keep(sample.targets.visibility).seg[0][::-1])
    write_pgm(d / "gt_centerness.pgm", sample.targets.centerness[0][::-1])
    if pred is not None:
        write_pgm(d / "pred_prob.pgm", pred[::-1])
        write_pgm(d / "pred_mask.pgm", (pred > 0.5)[::-1])


def cmd_train(cfg: RunConfig, out: Path) -> int:
    cfg.write(out / "resolved_config.txt")
    samples = _bank(cfg, "train", cfg.n_train)
    model = BevSegNet(cfg.model_config())
    trainer = Trainer(model, cfg.train_config(), out)

    def report(step, row):
        if step % cfg.log_every == 0:
            log.info("step %d lr %.2e total %.4f seg %.4f", step, row["lr"], row["total"], row["l_seg"])

    trainer.fit(_cycle(samples), report)
    log.info("checkpoint: %s", out / "final.ckpt")
    return 0


def _cycle(items):
    while True:
        yield from items


def cmd_eval(cfg: RunConfig, checkpoint: str | None, out: Path) -> int:
    model = _load_model(cfg, checkpoint)
    report = evaluate(model, _bank(cfg, "val", cfg.val_size), cfg.grid, cfg.threshold)
    report.to_csv(out / "metrics.csv")
    cfg.write(out / "resolved_config.txt")
    log.info("IoU %.4f (unfiltered %.4f) bands %s", report.iou(), report.iou("overall_unfiltered"),
             {k: round(v, 4) for k, v in report.band_iou.items()})
    return 0


def cmd_export(cfg: RunConfig, checkpoint: str | None, out: Path, sample_index: int = 0) -> int:
    model = _load_model(cfg, checkpoint)
    sample = _bank(cfg, "val", sample_index + 1)[sample_index]
    _export_sample(out / f"val_{sample_index:04d}", sample, predict_probability(model, sample))
    cfg.write(out / "resolved_config.txt")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevscan", description="BEV vehicle segmentation toolkit")
    p.add_argument("command", choices=["gen", "train", "eval", "export"])
    p.add_argument("--config", required=True, help="key = value run configuration")
    p.add_argument("--checkpoint", help="model checkpoint (eval, export)")
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.add_argument("--sample", type=int, default=0, help="validation sample index (export)")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config)
        out = _out_dir(cfg, args.out)
        if args.command == "gen":
            return cmd_gen(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, out)
        return cmd_export(cfg, args.checkpoint, out, args.sample)
    except (ConfigError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"bevscan: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
