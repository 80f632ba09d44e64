"""Exception hierarchy shared by every EGA module.

Each class carries the CLI exit code it maps to.
"""


class EgaError(Exception):
    exit_code = 1


class ConfigError(EgaError, ValueError):
    exit_code = 2


class NumericError(EgaError, ArithmeticError):
    exit_code = 3


class FormatError(EgaError, ValueError):
    """Malformed checkpoint or data file.  ``offset`` is the byte position
    where decoding failed, when known."""

    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(EgaError):
    exit_code = 5


class FrameError(ProtocolError):
    pass
