"""Exception types shared across the package."""


class FrameSynthError(Exception):
    """Base class for all package errors."""


class ShapeError(FrameSynthError, ValueError):
    pass


class InvalidRatioError(FrameSynthError, ValueError):
    pass


class InvalidTripletError(FrameSynthError, ValueError):
    pass


class DegenerateAnchorError(InvalidTripletError):
    pass


class InsufficientFramesError(FrameSynthError, ValueError):
    pass


class EmptyEvaluationError(FrameSynthError, ValueError):
    pass


class ArchiveError(FrameSynthError, IOError):
    """Raised for corrupt, truncated or wrong-version archives."""


class TrainingDiverged(FrameSynthError, RuntimeError):
    """A loss became non-finite during optimization."""
