"""Exception types shared across the package."""


class SplattrackError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(SplattrackError, ValueError):
    """Malformed or out-of-contract input (bad shapes, empty data, ...)."""


class BehindCameraError(SplattrackError, ValueError):
    """Point with non-positive camera-space depth passed to projection."""


class DegenerateOverlapError(SplattrackError, RuntimeError):
    """Too few valid pixels survive reprojection between two frames."""


class DegenerateGeometryError(SplattrackError, ValueError):
    """Point configuration too degenerate for alignment (collinear, < 3 poses)."""


class NumericalError(SplattrackError, ArithmeticError):
    """Optimization produced non-finite values."""


class FormatError(SplattrackError, ValueError):
    """Corrupt or truncated binary file; carries the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
