"""Exception hierarchy. Each category maps to a CLI exit code."""


class PPGBPError(Exception):
    exit_code = 1


class ConfigurationError(PPGBPError, ValueError):
    """Invalid parameters, unknown names, violated preconditions on settings."""

    exit_code = 1


class RejectionError(PPGBPError, ValueError):
    """Input data cannot be processed (too short, too few samples, no peaks)."""

    exit_code = 2


class FormatError(PPGBPError):
    """Malformed or truncated binary file."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StructuralError(PPGBPError, ValueError):
    """Incompatible shapes, head width vs scheme mismatch and similar."""

    exit_code = 2


class DivergenceError(PPGBPError, ArithmeticError):
    """Non-finite values during training."""

    exit_code = 3
