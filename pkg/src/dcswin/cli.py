"""Command-line interface: ``dcswin <command> [options]``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration or input error,
3 training divergence. ``verify`` exits with the number of failed groups.
The environment variable DCSWIN_THREADS caps BLAS threads (default 1, which
keeps runs bit-for-bit reproducible).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, format_config, load_config
from .data import (TileSpec, colorize, load_dataset, read_ppm, synth_dataset, tile,
                   write_pgm, write_ppm)
from .decoder import DCSwin
from .metrics import format_table, format_tsv

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class InputError(Exception):
    """Bad user input that should end with exit code 2."""


def _load_run_config(path, seed=None, out=None):
    cfg = load_config(path) if path else RunConfig()
    if seed is not None:
        cfg.model.seed = seed
        cfg.train.seed = seed
    if out is not None:
        cfg.output.dir = out
    return cfg


def _dataset(cfg, num_classes):
    """Samples described by the data section, tiled to ``data.tile`` when larger."""
    d = cfg.data
    if d.root:
        try:
            raw = load_dataset(d.root)
        except (OSError, ValueError) as exc:
            raise InputError(f"data.root: {exc}") from exc
        spec = TileSpec(d.tile, d.stride)
        samples = []
        for s in raw:
            if max(s.image.shape[1:]) > spec.tile:
                samples.extend(tile(s.image, s.label, spec)[0])
            else:
                samples.append(s)
    else:
        samples = synth_dataset(d.synth_count, d.synth_size, num_classes, d.synth_seed)
    for s in samples:
        lab = s.label[s.label != d.ignore_label]
        if lab.size and lab.max() >= num_classes:
            raise InputError(f"sample {s.id!r} has label {int(lab.max())} but the model "
                             f"has {num_classes} classes")
    return samples


def cmd_train(args):
    from .train import save_model, train

    cfg = _load_run_config(args.config, args.seed, args.out)
    model_cfg = cfg.model.build()
    samples = _dataset(cfg, model_cfg.num_classes)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    model = DCSwin(model_cfg, cfg.model.variant, seed=cfg.model.seed)
    tcfg = cfg.train_config()
    result = train(model, samples, tcfg, log_path=out / "train.tsv")
    save_model(out / "model.ckpt", model, result.norm_stats, {"config": format_config(cfg)})
    (out / "config.txt").write_text(format_config(cfg))
    last = result.log[-1] if result.log else None
    if last:
        print(f"step {last['step']}  loss {last['loss']:.4f}  oa {last['oa']:.4f}  "
              f"miou {last['miou']:.4f}  mean_f1 {last['mean_f1']:.4f}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'train.tsv'}")
    return EXIT_OK


def cmd_eval(args):
    from .train import evaluate, load_model

    cfg = _load_run_config(args.config, out=args.out)
    model, norm, _ = load_model(args.ckpt)
    K = model.cfg.num_classes
    if args.config and cfg.model.num_classes != K:
        raise InputError(f"config has model.num_classes = {cfg.model.num_classes} but the "
                         f"checkpoint predicts {K} classes")
    samples = _dataset(cfg, K)
    cm = evaluate(model, samples, norm, TileSpec(cfg.data.tile, cfg.data.stride),
                  cfg.data.ignore_label)
    text = format_table(cm, title=f"{len(samples)} images, {cm.total} pixels")
    print(text, end="")
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.txt").write_text(text)
    (out / "eval.tsv").write_text(format_tsv(cm))
    return EXIT_OK


def cmd_predict(args):
    from .train import load_model, predict_logits

    model, norm, _ = load_model(args.ckpt)
    try:
        image = read_ppm(args.image)
    except (OSError, ValueError) as exc:
        raise InputError(f"--image: {exc}") from exc
    pred = predict_logits(model, image, norm, TileSpec(args.tile, args.stride)).argmax(0)
    stem = Path(args.out)
    if stem.suffix.lower() in (".ppm", ".pgm"):
        stem = stem.with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(stem.with_suffix(".ppm"), colorize(pred))
    write_pgm(stem.with_suffix(".pgm"), pred)
    print(f"wrote {stem.with_suffix('.ppm')} and {stem.with_suffix('.pgm')}")
    return EXIT_OK


def cmd_bench_attention(args):
    from .bench import LINEAR_SLOPE_BAND, QUADRATIC_SLOPE_BAND, bench_attention

    res = bench_attention(args.sizes, channels=args.channels, seed=args.seed, force=args.force)
    text = res.tsv()
    print(text, end="")
    for label, slope, (lo, hi) in (("linear", res.slope_linear, LINEAR_SLOPE_BAND),
                                   ("quadratic", res.slope_quadratic, QUADRATIC_SLOPE_BAND)):
        verdict = "n/a" if np.isnan(slope) else ("within" if lo <= slope <= hi else "OUTSIDE")
        print(f"{label} slope {slope:.3f} {verdict} [{lo}, {hi}]")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_bench_kernels(args):
    from . import _kernels
    from .bench import bench_kernels, kernels_tsv

    text = kernels_tsv(bench_kernels())
    print(f"# active backend: {_kernels.BACKEND}")
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_verify(args):
    from . import verify

    fault = None
    if args.inject_fault is not None:
        fault = verify.pick_fault(args.inject_fault)
        print(f"injecting fault: {fault}")
    report = verify.run(args.group or None, fault=fault, seed=args.seed)
    print(report.summary(), end="")
    return min(len(report.failed_groups), 255)


def cmd_defaults(args):
    print(format_config(RunConfig()), end="")
    return EXIT_OK


def cmd_ablation(args):
    from .train import ablation_tsv, format_ablation_table, run_ablation

    cfg = _load_run_config(args.config, args.seed, args.out)
    model_cfg = cfg.model.build()
    train_samples = _dataset(cfg, model_cfg.num_classes)
    held_out = None
    if not cfg.data.root:
        # held-out scenes come from the next generator seed
        d = cfg.data
        held_out = synth_dataset(d.synth_count, d.synth_size, model_cfg.num_classes,
                                 d.synth_seed + 1)
    rows = run_ablation(model_cfg, cfg.train_config(), train_samples, held_out,
                        model_seed=cfg.model.seed)
    text = format_ablation_table(rows)
    print(text, end="")
    for r in rows:
        print(f"{r.method}: train accuracy {r.train_accuracy:.4f}, {r.parameters:,} parameters")
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(text)
    (out / "ablation.tsv").write_text(ablation_tsv(rows))
    return EXIT_OK


def _sizes(text):
    try:
        sizes = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return sizes


def build_parser():
    p = argparse.ArgumentParser(prog="dcswin", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model and write model.ckpt and train.tsv")
    s.add_argument("--config", help="config file (defaults when omitted)")
    s.add_argument("--seed", type=int, help="overrides model.seed and train.seed")
    s.add_argument("--out", help="output directory (overrides output.dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the configured data")
    s.add_argument("--config", help="config file; its data section selects the images")
    s.add_argument("--ckpt", required=True, help="checkpoint written by train")
    s.add_argument("--out", help="directory for eval.txt and eval.tsv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="label one PPM image")
    s.add_argument("--ckpt", required=True, help="checkpoint written by train")
    s.add_argument("--image", required=True, help="input image (binary PPM)")
    s.add_argument("--out", required=True,
                   help="output stem; writes STEM.ppm (colour) and STEM.pgm (class ids)")
    s.add_argument("--tile", type=int, default=1024, help="tile size for large images")
    s.add_argument("--stride", type=int, default=0, help="tile stride (0 = tile size)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("bench-attention", help="time factorized vs brute-force attention")
    s.add_argument("--sizes", type=_sizes, default=[1024, 4096, 16384, 65536],
                   help="comma-separated token counts")
    s.add_argument("--channels", type=int, default=256, help="feature channels C")
    s.add_argument("--seed", type=int, default=0, help="input seed")
    s.add_argument("--force", action="store_true",
                   help="run the brute-force oracle above 4096 tokens")
    s.add_argument("--out", help="write the table to this TSV file")
    s.set_defaults(func=cmd_bench_attention)

    s = sub.add_parser("bench-kernels", help="time compiled vs numpy im2col/col2im")
    s.add_argument("--out", help="write the table to this TSV file")
    s.set_defaults(func=cmd_bench_kernels)

    s = sub.add_parser("verify", help="run the self-check suite")
    s.add_argument("--inject-fault", type=int, metavar="SEED",
                   help="replace one implementation with a faulty one chosen by SEED")
    s.add_argument("--group", action="append",
                   help="run only this group (repeatable)")
    s.add_argument("--seed", type=int, default=0, help="seed for random test inputs")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("defaults", help="print the default configuration")
    s.set_defaults(func=cmd_defaults)

    s = sub.add_parser("ablation", help="train all four decoder variants and tabulate")
    s.add_argument("--config", help="config file (defaults when omitted)")
    s.add_argument("--seed", type=int, help="overrides model.seed and train.seed")
    s.add_argument("--out", help="output directory (overrides output.dir)")
    s.set_defaults(func=cmd_ablation)
    return p


def main(argv=None):
    from .train import DivergenceError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if getattr(args, "group", None):
        from .verify import GROUPS

        unknown = [g for g in args.group if g not in GROUPS]
        if unknown:
            print(f"error: unknown group(s) {unknown}; choose from {list(GROUPS)}",
                  file=sys.stderr)
            return EXIT_CONFIG
    threads = int(os.environ.get("DCSWIN_THREADS", "1") or 1)
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (ConfigError, InputError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
