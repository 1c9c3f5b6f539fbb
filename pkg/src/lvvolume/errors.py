"""Exception types raised across the pipeline."""


class LVError(Exception):
    """Base class for every error raised by this package."""


class StudyFormatError(LVError, ValueError):
    """A study directory or its metadata sidecar is malformed."""


class FrameCountMismatch(StudyFormatError):
    pass


class GeometryError(LVError, ValueError):
    pass


class ParallelError(GeometryError):
    """Two planes, or a line and a plane, are (numerically) parallel."""


class DegenerateStackError(LVError, ValueError):
    """The short-axis stack is too shallow for the slice-role taxonomy."""


class MissingViewError(LVError, KeyError):
    def __init__(self, role):
        super().__init__(f"view {role} is not available in this study")
        self.role = role

    def __str__(self):
        return self.args[0]


class ShapeError(LVError, ValueError):
    pass


class NumericFault(LVError, FloatingPointError):
    """A tensor picked up NaN or Inf values."""


class ConfigError(LVError, ValueError):
    pass


class FeedbackError(LVError, ValueError):
    pass
