"""Exception hierarchy shared by all frametwin modules.

The CLI maps these onto exit codes: usage errors exit 1, validation and
I/O problems exit 2, numeric failures exit 3.
"""


class FrameTwinError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 2


class InvalidArgument(FrameTwinError, ValueError):
    """An argument is outside its documented domain."""


class DegenerateCurveError(FrameTwinError):
    """A curve has no usable tangent anywhere along the requested params."""


class IllConditionedError(FrameTwinError):
    """The refit normal matrix is singular or numerically close to it."""


class UndefinedDistanceError(FrameTwinError):
    """Distance to the printed structure was requested with nothing printed."""


class NumericError(FrameTwinError):
    """Non-finite values appeared in parameters, gradients or losses."""

    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UsageError(FrameTwinError):
    """An API was driven in the wrong order (e.g. backward before forward)."""

    exit_code = 1
