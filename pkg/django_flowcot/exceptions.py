class FlowCotError(Exception):
    """Base class for every error raised by django_flowcot."""


class ConfigError(FlowCotError, ValueError):
    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = u'{path}: {message}'.format(path=path, message=message)
        super(ConfigError, self).__init__(message)


class ShapeError(FlowCotError, ValueError):
    pass


class NonFiniteError(FlowCotError, ValueError):
    pass


class SupportMismatchError(FlowCotError, ValueError):
    pass


class TokenRangeError(FlowCotError, IndexError):
    pass


class EmptyMaskError(FlowCotError, ValueError):
    pass


class NonScalarLossError(FlowCotError, ValueError):
    pass


class DivergenceError(FlowCotError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, breakdown=None, seed=None):
        self.step = step
        self.breakdown = breakdown
        self.seed = seed
        super(DivergenceError, self).__init__(message)


class CheckpointError(FlowCotError):
    pass


class CacheError(FlowCotError):
    pass


class TaskMismatchError(FlowCotError, ValueError):
    pass


class InvalidDistributionError(FlowCotError, ValueError):
    pass


class LatentStateError(FlowCotError, ValueError):
    pass


class MechanismError(FlowCotError, ValueError):
    pass


class EmptySampleError(FlowCotError, ValueError):
    pass


class ReportError(FlowCotError, ValueError):
    """An evaluation report that cannot be read or does not hold valid accuracies."""
