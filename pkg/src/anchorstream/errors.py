"""Exception hierarchy shared across the package."""


class AnchorStreamError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(AnchorStreamError):
    """Invalid configuration or scene specification."""


class BudgetError(ConfigError):
    """Storage budget infeasible; carries the minimum feasible bytes/frame."""

    def __init__(self, message: str, minimum_bytes: int):
        super().__init__(message)
        self.minimum_bytes = minimum_bytes


class NumericalError(AnchorStreamError):
    """Numerical failure: divergence, degenerate eigenproblem, etc."""


class DegenerateQuaternionError(NumericalError):
    """A quaternion update collapsed to near-zero norm; the frame is rejected."""


class PlyParseError(AnchorStreamError):
    """Malformed gaussian PLY input; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StreamFormatError(AnchorStreamError):
    """Malformed, truncated, or inconsistent codec stream."""
