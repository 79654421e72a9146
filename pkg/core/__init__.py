"""
Core InsPose functionality
"""

from .registry import registry, command, CommandContext
from .errors import InsPoseError, ConfigError

__all__ = [
    "registry",
    "command",
    "CommandContext",
    "InsPoseError",
    "ConfigError",
]
