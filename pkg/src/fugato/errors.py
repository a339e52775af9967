"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
anything else -> 4.
"""


class FugatoError(Exception):
    """Base class for all package errors."""


class ConfigError(FugatoError):
    """Invalid configuration value or inconsistent option combination."""


class DataError(FugatoError):
    """Malformed or unsupported input data."""


class MidiParseError(DataError):
    """Standard MIDI File could not be parsed.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DecodeError(DataError):
    """Token sequence violates the grammar of its encoding scheme."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (token position {position})"
        super().__init__(message)
        self.position = position
