"""Exception types shared across the package."""


class VerdocError(Exception):
    """Base class for all package errors."""


class MalformedDocument(VerdocError):
    pass


class SchemaViolation(VerdocError):
    pass


class PathNotFound(VerdocError):
    pass


class KindMismatch(VerdocError):
    pass


class NoPayloadAtSource(VerdocError):
    pass


class Unserializable(VerdocError):
    pass


class EmptyVocabulary(VerdocError):
    pass


class DimensionMismatch(VerdocError, ValueError):
    pass


class NonFiniteWeights(VerdocError, ValueError):
    pass


class CorruptModelFile(VerdocError):
    pass


class NoRegions(VerdocError):
    pass


class ModeMismatch(VerdocError):
    pass


class Infeasible(VerdocError):
    pass


class NoDonorForPath(VerdocError):
    pass


class TriggerPathUnavailable(VerdocError):
    pass


class ConfigError(VerdocError):
    pass


class BudgetExhausted(VerdocError):
    """An attack ran out of rounds; ``result`` holds the best failed attempt."""

    def __init__(self, message: str = "", result=None):
        super().__init__(message)
        self.result = result
