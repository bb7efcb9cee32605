"""Shared exception types.

Every error raised on a contract boundary derives from ForgeError so the CLI
can catch one family and turn it into a nonzero exit with a clean message.
"""


class ForgeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ForgeError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ForgeError):
    """An operation was called in a way that violates its contract."""


class AlignmentError(ForgeError):
    """Cross-modal timing or coordinate-basis mismatch."""


class ConfigError(ForgeError):
    """Invalid or inconsistent configuration."""


class CaptionParseError(ForgeError):
    """Structured caption text could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CaptionValidationError(ForgeError):
    """Caption parsed but violates document invariants."""


class CorrectionError(ForgeError):
    """Speaker-correction input does not match the caption document."""


class SchemaError(ForgeError):
    """A data record is missing or has a malformed field."""
