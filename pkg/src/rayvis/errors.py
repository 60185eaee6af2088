"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, ``InputError``
(bad inputs, bad files, mismatched dimensions) exits 2, and
``NumericalError`` (singular systems, failed optimizations) exits 3.
"""


class RayvisError(Exception):
    """Base class for all package errors."""


class InputError(RayvisError):
    """Invalid input data, file, or configuration."""


class PixelBoundsError(InputError):
    """Pixel coordinate outside the image."""


class BehindCameraError(InputError):
    """Point has non-positive depth in the camera frame."""


class IntervalOrderError(InputError):
    """Depth interval endpoints out of order."""


class ConfigurationError(InputError):
    """Inconsistent or unsatisfiable configuration."""


class DimensionMismatchError(InputError):
    """Array or image dimensions do not agree."""


class SceneFormatError(InputError):
    """Malformed scene description file."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class NumericalError(RayvisError):
    """Numerical failure (singular system, non-finite result)."""


class DegenerateFitError(NumericalError):
    """Least-squares system is singular and unregularized."""
