"""Exception hierarchy shared by every stage of the toolkit."""

from __future__ import annotations


class LfeError(Exception):
    """Base class for all toolkit errors."""


# corpus
class MissingFile(LfeError, FileNotFoundError):
    pass


class DuplicateUtteranceId(LfeError):
    pass


class SchemaViolation(LfeError):
    pass


class InsufficientData(LfeError):
    def __init__(self, message: str, shortfall: dict[str, float] | None = None):
        super().__init__(message)
        self.shortfall = dict(shortfall or {})


class EmptyAudio(LfeError):
    pass


# features
class TooShort(LfeError):
    pass


class RateMismatch(LfeError):
    pass


class FeatureError(LfeError):
    """Wraps an audio/feature failure with the offending utterance id."""

    def __init__(self, utterance_id: str, cause: Exception):
        super().__init__(f"{utterance_id}: {cause}")
        self.utterance_id = utterance_id
        self.cause = cause


# ubm / tvspace
class TooFewFrames(LfeError):
    pass


class DimensionMismatch(LfeError, ValueError):
    pass


class NumericalFailure(LfeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class EmptyUtterance(LfeError):
    pass


class TooFewUtterances(LfeError):
    pass


class SingularSystem(LfeError):
    def __init__(self, message: str, component: int):
        super().__init__(message)
        self.component = component


class ConfigMismatch(LfeError):
    pass


class FormatError(LfeError):
    """Binary file with wrong magic, version or truncated payload."""


# abx
class TooFewSpeakers(LfeError):
    pass


# stats
class DegenerateSame(LfeError, ZeroDivisionError):
    pass


class EmptyGroup(LfeError):
    pass


class LengthMismatch(LfeError):
    pass


class TooFewUnits(LfeError):
    pass


class MissingFamilyLabel(LfeError):
    pass


class MissingContrast(LfeError):
    pass


# pipeline
class InvalidSpec(LfeError):
    pass


class StageError(LfeError):
    """A pipeline stage failed; carries enough context to find the cache entry."""

    def __init__(self, stage: str, subject: str, cache_key: str, cause: Exception):
        super().__init__(f"[{stage}] {subject} (cache key {cache_key}): {cause}")
        self.stage = stage
        self.subject = subject
        self.cache_key = cache_key
        self.cause = cause
