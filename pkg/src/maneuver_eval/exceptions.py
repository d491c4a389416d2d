"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`ManeuverEvalError`,
which itself subclasses :class:`ValueError` so callers that only care about
"bad input" can catch the builtin.
"""

from __future__ import annotations


class ManeuverEvalError(ValueError):
    """Base class for all toolkit errors."""


# -- trajectories -----------------------------------------------------------


class TrajectoryError(ManeuverEvalError):
    pass


class WrongLengthError(TrajectoryError):
    pass


class WrongSamplingError(TrajectoryError):
    pass


class NonFiniteCoordinateError(TrajectoryError):
    pass


class PastNotAnchoredAtOriginError(TrajectoryError):
    pass


class IndexOutOfRangeError(TrajectoryError, IndexError):
    pass


class TooShortError(TrajectoryError):
    pass


class DegenerateChordError(TrajectoryError):
    """Start and end of a trajectory coincide, so tortuosity is undefined."""


class CheckpointOutOfRangeError(TrajectoryError):
    pass


class ShapeMismatchError(TrajectoryError):
    pass


# -- scoring ----------------------------------------------------------------


class UnsupportedCheckpointError(ManeuverEvalError):
    pass


class EmptyReferenceSetError(ManeuverEvalError):
    pass


class DegenerateVarianceError(ManeuverEvalError):
    pass


# -- actions ----------------------------------------------------------------


class IntervalOutOfRangeError(ManeuverEvalError):
    pass


# -- coherence --------------------------------------------------------------


class ProviderUnavailableError(ManeuverEvalError):
    pass


class DimensionMismatchError(ManeuverEvalError):
    pass


class ZeroVectorError(ManeuverEvalError):
    pass


class LengthMismatchError(ManeuverEvalError):
    pass


# -- augmentation -----------------------------------------------------------


class FilterDivergenceError(ManeuverEvalError):
    pass


class DegeneratePathError(ManeuverEvalError):
    pass


# -- prompts / parsing ------------------------------------------------------


class WrongExampleCountError(ManeuverEvalError):
    pass


class MissingRequiredFieldError(ManeuverEvalError):
    pass


class TagNotFoundError(ManeuverEvalError):
    pass


class MalformedPairError(ManeuverEvalError):
    pass


class MissingFieldError(ManeuverEvalError):
    pass


class UnknownCommandError(ManeuverEvalError):
    pass


# -- dataset i/o ------------------------------------------------------------


class SchemaViolationError(ManeuverEvalError):
    """A scenario or prediction document failed validation.

    Attributes:
        path: dotted location of the offending field (e.g. ``references``).
    """

    def __init__(self, message: str, path: str = "", source: str = "") -> None:
        self.path = path
        self.source = source
        where = f" [{source}]" if source else ""
        at = f" at '{path}'" if path else ""
        super().__init__(f"{message}{at}{where}")


class DuplicateIdError(ManeuverEvalError):
    pass


class UnknownScenarioTypeError(SchemaViolationError):
    pass


class MalformedRecordError(ManeuverEvalError):
    def __init__(self, message: str, line: int) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}")


# -- harness ----------------------------------------------------------------


class MissingTracesError(ManeuverEvalError):
    pass


class MissingActionsError(ManeuverEvalError):
    pass


class JoinTooSmallError(ManeuverEvalError):
    pass
