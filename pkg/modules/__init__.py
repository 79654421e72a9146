"""
Command modules - importing one registers its commands with core.registry
"""

import importlib
import logging
from typing import TYPE_CHECKING, List, Sequence, Tuple

if TYPE_CHECKING:
    from core.registry import CommandContext

logger = logging.getLogger(__name__)


def load_modules(ctx: "CommandContext", enabled_modules: Sequence[str]) -> Tuple[List[str], List[Tuple[str, str]]]:
    """
    Import the enabled command modules and run their setup(ctx)

    A module that fails to import or set up is reported and skipped; the
    commands of the others stay usable.

    Args:
        ctx: Context of the current invocation
        enabled_modules: Module names under modules/

    Returns:
        (loaded names, [(failed name, error message)])
    """
    loaded, failed = [], []
    for name in enabled_modules:
        try:
            module = importlib.import_module(f"modules.{name}")
            setup = getattr(module, "setup", None)
            if setup is not None:
                setup(ctx)
        except Exception as e:
            logger.error(f"Module {name} failed to load: {e}")
            failed.append((name, str(e)))
            continue
        loaded.append(name)

    logger.debug(f"Modules: {len(loaded)} loaded, {len(failed)} failed")
    return loaded, failed
