#!/usr/bin/env python3
"""
InsPose - Main Entry Point

Single-stage multi-person pose estimation: train, evaluate, infer, visualize.

Usage:
    python inspose.py train --config configs/desk.cfg
    python inspose.py eval --ckpt runs/desk/last.pt
    python inspose.py infer --ckpt runs/desk/last.pt --images 'data/*.png' --out results.json
    python inspose.py visualize --ckpt runs/desk/last.pt --image scene.png --out pose.png
    python inspose.py --debug train ...      # Debug logging
"""

import sys
import argparse
import logging
from pathlib import Path

# Load environment variables from .env BEFORE importing config
from dotenv import load_dotenv

script_dir = Path(__file__).parent.resolve()
for env_file in (script_dir / ".env", Path.cwd() / ".env"):
    if env_file.exists():
        load_dotenv(env_file, override=False)
        break

# Now import config (it will read from os.environ)
from config import config
from core.registry import registry, CommandContext
from modules import load_modules


def setup_logging(debug: bool = False):
    """Configure logging to stderr and <runs>/logs/inspose.log"""
    level = logging.DEBUG if debug else getattr(logging, config.LOG_LEVEL, logging.INFO)

    handlers = [logging.StreamHandler()]
    try:
        log_dir = config.RUNS_DIR / "logs"
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_dir / "inspose.log", encoding="utf-8"))
    except OSError as e:
        print(f"[WARN] File logging disabled: {e}")

    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=handlers,
        force=True,
    )


def print_commands():
    print("Commands:")
    for info in registry.list_commands():
        print(f"  {info.name:<10} {info.description}")
        if info.usage:
            print(f"  {'':<10} usage: inspose.py {info.usage}")


def main(argv=None) -> int:
    """Main entry point"""
    parser = argparse.ArgumentParser(description="InsPose pose estimation toolchain", add_help=False)
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    parser.add_argument("--device", help="torch device (default: INSPOSE_DEVICE or auto)")
    parser.add_argument("-h", "--help", action="store_true", help="List commands")
    parser.add_argument("command", nargs="?", help="Command to run")
    parser.add_argument("args", nargs=argparse.REMAINDER, help="Command arguments")
    args = parser.parse_args(argv)

    setup_logging(debug=args.debug)

    device = args.device or config.resolve_device()
    ctx = CommandContext(
        config=config,
        argv=list(args.args),
        command=(args.command or "").lower(),
        device=device,
        debug=args.debug,
    )

    loaded, _ = load_modules(ctx, config.ENABLED_MODULES)

    if args.help or not args.command:
        print_commands()
        return 0 if args.help else 2

    print("")
    print("=" * 58)
    print("  InsPose")
    print("=" * 58)
    print(f"  Command: {ctx.command}")
    print(f"  Device:  {device}")
    print(f"  Runs:    {config.RUNS_DIR}")
    print(f"  Modules: {', '.join(loaded)}")
    print("=" * 58)

    return registry.handle_command(ctx)


if __name__ == "__main__":
    sys.exit(main())
