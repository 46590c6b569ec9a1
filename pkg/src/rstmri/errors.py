"""Exception hierarchy shared by every module."""


class RstmriError(Exception):
    pass


class ShapeError(RstmriError, ValueError):
    pass


class ConfigError(RstmriError, ValueError):
    pass


class InvalidSpecError(ConfigError):
    pass


class InfeasibleAccelerationError(ConfigError):
    pass


class StateError(RstmriError, RuntimeError):
    pass


class DivergenceError(StateError):
    pass


class FormatError(RstmriError, ValueError):
    """Malformed DMT4 data. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SizeError(ShapeError):
    pass
