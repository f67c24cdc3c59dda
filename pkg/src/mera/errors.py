"""Exception hierarchy shared across the package."""


class MeraError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(MeraError, ValueError):
    pass


class StateError(MeraError, RuntimeError):
    pass


class RegistrationError(MeraError, ValueError):
    pass


class RoutingError(MeraError, KeyError):
    pass


class MergeError(MeraError, ValueError):
    pass


class MetricError(MeraError, ValueError):
    pass


class ConfigError(MeraError, ValueError):
    """Invalid configuration; ``path`` names the offending dotted key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class FormatError(MeraError, ValueError):
    """Malformed checkpoint; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionError(FormatError):
    pass
