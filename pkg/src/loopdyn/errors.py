"""Exception and warning types."""

from __future__ import annotations


class LoopdynError(Exception):
    """Base class for all package errors."""


class InvalidInputError(LoopdynError, ValueError):
    pass


class SeriesTooShortError(InvalidInputError):
    pass


class InsufficientRecurrencesError(InvalidInputError):
    pass


class VocabularyError(LoopdynError, IndexError):
    pass


class CaptureError(LoopdynError):
    """An analysis needs data the trace was not asked to record."""


class RecurrenceRangeError(LoopdynError, IndexError):
    pass


class DivergedForwardError(LoopdynError, FloatingPointError):
    """Non-finite activations; carries where the forward pass blew up."""

    def __init__(self, layer: int, recurrence: int | None = None, stage: str = "recurrent"):
        self.layer = layer
        self.recurrence = recurrence
        self.stage = stage
        where = f"{stage} layer {layer}"
        if recurrence is not None:
            where += f", recurrence {recurrence}"
        super().__init__(f"non-finite activations at {where}")


class SpecError(LoopdynError, ValueError):
    """Malformed experiment spec; ``location`` is a key path or line:column."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class ZeroVectorWarning(UserWarning):
    pass


class RankDeficientWarning(UserWarning):
    pass
