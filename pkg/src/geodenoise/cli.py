"""Command-line surface.

Subcommands:
  pretrain  --config CFG --out CKPT [--metrics CSV]
  finetune  --config CFG [--init CKPT] [--metrics CSV]
  gen-data  --template XYZ --count N --sigma S --seed K --out XYZ --labels CSV
  check     run the built-in invariant and oracle suite

The environment variable GEOSSL_SEED overrides the config seed. Every
error exits nonzero with a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .geometry import XyzParseError, parse_xyz, serialize_xyz
from .harness import (
    emit_metrics,
    generate_synthetic_conformers,
    run_finetune,
    run_pretrain,
    write_labels,
)


def _load_config_with_env(path: str):
    config = load_config(path)
    seed_override = os.environ.get("GEOSSL_SEED")
    if seed_override is not None:
        try:
            config.seed = int(seed_override)
        except ValueError:
            raise ConfigError(f"GEOSSL_SEED must be an integer, got {seed_override!r}")
    return config


def _cmd_pretrain(args) -> int:
    config = _load_config_with_env(args.config)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = run_pretrain(config, resume=resume, max_steps=args.max_steps)
    save_checkpoint(result.checkpoint, args.out)
    if args.metrics:
        if result.rows:
            emit_metrics(result.rows, args.metrics)
        else:
            print("no training steps performed; metrics not written", file=sys.stderr)
    final = result.rows[-1].loss if result.rows else float("nan")
    print(f"pretrain complete: objective={config.objective} steps={result.checkpoint.step} final_loss={final:.10g}")
    return 0


def _cmd_finetune(args) -> int:
    config = _load_config_with_env(args.config)
    init = load_checkpoint(args.init) if args.init else None
    result = run_finetune(config, init=init)
    if args.metrics and result.rows:
        emit_metrics(result.rows, args.metrics)
    print(f"finetune complete: test_mae={result.test_mae:.10g} val_mae={result.val_mae:.10g}")
    return 0


def _cmd_gen_data(args) -> int:
    templates = parse_xyz(Path(args.template).read_text())
    if len(templates) != 1:
        raise ValueError(f"template file must hold exactly one molecule, found {len(templates)}")
    rng = np.random.default_rng(args.seed)
    samples, labels = generate_synthetic_conformers(templates[0], args.count, args.sigma, rng)
    Path(args.out).write_text(
        serialize_xyz(samples, comments=[f"sample {k}" for k in range(len(samples))])
    )
    write_labels(labels, args.labels)
    print(f"wrote {len(samples)} conformers to {args.out} and labels to {args.labels}")
    return 0


def _cmd_check(args) -> int:
    from .selfcheck import run_all_checks

    return 0 if run_all_checks() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geodenoise",
        description="Pretrain SE(3)-invariant molecular encoders by denoising pair distances.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run a pretraining objective")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--metrics", help="metrics CSV output path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")
    p.set_defaults(func=_cmd_pretrain)

    f = sub.add_parser("finetune", help="fine-tune a regression head and report MAE")
    f.add_argument("--config", required=True)
    f.add_argument("--init", help="checkpoint with pretrained encoder weights")
    f.add_argument("--metrics", help="metrics CSV output path")
    f.set_defaults(func=_cmd_finetune)

    g = sub.add_parser("gen-data", help="generate labeled synthetic conformers")
    g.add_argument("--template", required=True, help="single-molecule XYZ file")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--sigma", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="conformer XYZ output path")
    g.add_argument("--labels", required=True, help="labels CSV output path")
    g.set_defaults(func=_cmd_gen_data)

    c = sub.add_parser("check", help="run the invariant and oracle suite")
    c.set_defaults(func=_cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, XyzParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
