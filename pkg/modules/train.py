"""
Train module - model training

Commands:
- train --config <path> [--seed N] [--resume <ckpt>] [--<section.key> <value> ...]
"""

import argparse
import logging
from pathlib import Path

from config import load_config, parse_override_args
from core.registry import command, CommandContext
from core.trainer import Trainer


logger = logging.getLogger(__name__)


def run_train(config, run_dir, device: str = "cpu", resume=None, dataset=None) -> Path:
    """
    Train a model

    Args:
        config: Validated Config
        run_dir: Output directory (config.txt, metrics.jsonl, checkpoints)
        device: torch device
        resume: Optional checkpoint to continue from
        dataset: Optional dataset overriding data.source

    Returns:
        Path of last.pt
    """
    trainer = Trainer(config, run_dir, device=device, dataset=dataset)
    if resume:
        trainer.resume(resume)
    return trainer.run()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inspose.py train", description="Train an InsPose model")
    parser.add_argument("--config", help="Flat key-value config file")
    parser.add_argument("--seed", type=int, help="Overrides train.seed and scene.seed")
    parser.add_argument("--resume", help="Checkpoint to resume from")
    parser.add_argument("--out", help="Output directory (default: <runs>/<config name>)")
    return parser


@command(
    "train",
    description="Train a model",
    usage="train --config configs/desk.cfg [--seed N] [--resume runs/desk/last.pt]",
)
def train_cmd(ctx: CommandContext):
    args, extra = build_parser().parse_known_args(ctx.argv)
    overrides = parse_override_args(extra)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
        overrides["scene.seed"] = str(args.seed)
    if args.out:
        overrides["train.out_dir"] = args.out
    cfg = load_config(args.config, overrides)

    run_dir = cfg.run_dir(Path(args.config).stem if args.config else "default")
    last = run_train(cfg, run_dir, device=ctx.device, resume=args.resume)
    print(f"Training finished: {last}")
    return 0


def setup(ctx):
    """Module setup"""
    logger.debug("train module ready")
