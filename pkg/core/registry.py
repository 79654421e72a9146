"""
Command registry for the InsPose command line

Command modules register handlers with the @command decorator; inspose.py
resolves argv[1] (name or alias, case-insensitive) and turns the handler's
result into a process exit code.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

from .errors import InsPoseError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_INTERRUPTED = 130


@dataclass
class CommandInfo:
    """A registered command"""
    name: str
    handler: Callable
    description: str = ""
    usage: str = ""
    aliases: List[str] = field(default_factory=list)
    module: str = ""


@dataclass
class CommandContext:
    """Context passed to command handlers"""
    config: Any  # config.Config instance
    argv: List[str]  # Arguments after the command name
    command: str  # Command that was invoked
    device: str = "cpu"
    debug: bool = False


class CommandRegistry:
    """Name and alias lookup for CLI commands"""

    def __init__(self):
        self.commands: Dict[str, CommandInfo] = {}
        self.aliases: Dict[str, str] = {}  # alias -> command name

    def register(
        self,
        name: str,
        handler: Callable,
        description: str = "",
        usage: str = "",
        aliases: Optional[List[str]] = None,
        module: str = "",
    ) -> CommandInfo:
        """
        Register a command

        Args:
            name: Command name as typed after `inspose.py`
            handler: Function taking a CommandContext and returning an exit code
            description: One-line help text
            usage: Usage example shown by --help
            aliases: Alternative names
            module: Command module that registered it

        Returns:
            The CommandInfo object
        """
        info = CommandInfo(
            name=name.lower(),
            handler=handler,
            description=description.strip().splitlines()[0] if description.strip() else "",
            usage=usage,
            aliases=[a.lower() for a in aliases or []],
            module=module,
        )
        self.commands[info.name] = info
        for alias in info.aliases:
            self.aliases[alias] = info.name
        return info

    def get_command(self, name: str) -> Optional[CommandInfo]:
        """Command by name or alias, None when unknown"""
        name = name.lower()
        return self.commands.get(self.aliases.get(name, name))

    def handle_command(self, ctx: CommandContext) -> int:
        """
        Run the command named by ctx.command

        Returns:
            0 on success, the handler's own code if it returns one, 1 when it
            raises, 2 for an unknown command, 130 on Ctrl-C
        """
        info = self.get_command(ctx.command)
        if info is None:
            logger.error(f"Unknown command: {ctx.command} (try --help)")
            return EXIT_USAGE

        try:
            result = info.handler(ctx)
        except KeyboardInterrupt:
            logger.warning(f"{info.name} interrupted")
            return EXIT_INTERRUPTED
        except InsPoseError as e:
            logger.error(f"{info.name} failed: {type(e).__name__}: {e}")
            logger.debug("Traceback", exc_info=True)
            return EXIT_FAILED
        except Exception as e:
            logger.exception(f"{info.name} crashed: {e}")
            return EXIT_FAILED
        return int(result or EXIT_OK)

    def list_commands(self) -> List[CommandInfo]:
        """Registered commands sorted by name"""
        return sorted(self.commands.values(), key=lambda c: c.name)


# Global registry instance
registry = CommandRegistry()


def command(name: Optional[str] = None, description: str = "", usage: str = "", aliases: Optional[List[str]] = None):
    """
    Decorator registering a command handler in the global registry

    The module is taken from the handler's `modules.X` import path.

    Example:
        @command("train", description="Train a model")
        def train_cmd(ctx):
            ...
    """
    def decorator(func: Callable) -> Callable:
        cmd_name = name or func.__name__.replace("_cmd", "")
        module = func.__module__.split("modules.")[-1] if "modules." in func.__module__ else ""
        registry.register(
            name=cmd_name,
            handler=func,
            description=description or func.__doc__ or "",
            usage=usage,
            aliases=aliases,
            module=module,
        )
        return func

    return decorator
