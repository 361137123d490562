"""Exception hierarchy shared by every flexpipe layer."""

from __future__ import annotations


class FlexpipeError(Exception):
    """Base class for all flexpipe errors."""


class ConfigError(FlexpipeError, ValueError):
    """A parameter or configuration value is out of range or inconsistent."""


class RegistrationError(FlexpipeError):
    """A port could not be registered on a kernel (e.g. duplicate tag)."""


class ActivationError(FlexpipeError):
    """A port could not be activated with the requested connection state."""


class PortUsageError(FlexpipeError):
    """A data operation was attempted on a port that does not support it."""


class EndOfStream(FlexpipeError):
    """The channel feeding a port was closed and fully drained."""


class ChannelClosed(FlexpipeError):
    """A put was attempted on a channel that has already been closed."""


class TransportError(FlexpipeError, OSError):
    """A remote session broke or a socket operation failed."""


class DecodeError(FlexpipeError, ValueError):
    """Wire bytes could not be decoded into a message."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class RecipeError(FlexpipeError):
    """A recipe failed to parse or validate.

    ``violations`` holds every problem found, each a ``Violation`` with a
    dotted path into the recipe and, where known, the YAML line number.
    """

    def __init__(self, violations: list) -> None:
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class DeploymentError(FlexpipeError):
    """A pipeline could not be instantiated, deployed or started."""
