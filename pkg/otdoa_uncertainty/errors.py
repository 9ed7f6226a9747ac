"""Exception hierarchy shared by every stage.

The CLI catches ``PositioningError`` at the top level, logs it and exits nonzero;
everything below it names the concrete failure so callers can react to the ones
they can recover from (a failed sampled solve, an undefined correlation).
"""


class PositioningError(Exception):
    """Base class for all errors raised by otdoa-uncertainty."""


class ConfigError(PositioningError, ValueError):
    pass


class InvalidInputError(PositioningError, ValueError):
    pass


class InsufficientGeometryError(PositioningError):
    pass


class DegenerateGeometryError(PositioningError):
    pass


class NotPositiveDefiniteError(PositioningError):
    pass


class TrainingFailedError(PositioningError):
    pass


class InsufficientEnsembleError(PositioningError):
    pass


class UncertaintyUnavailableError(PositioningError):
    pass


class UndefinedCorrelationError(PositioningError):
    pass


class DatasetSchemaError(PositioningError):
    pass


class ModelFormatError(PositioningError):
    pass


class StageInputError(PositioningError):
    pass


class StageOutputError(PositioningError):
    pass


class EmptySplitError(PositioningError):
    pass
