"""Exception hierarchy for the harness.

Every error raised on purpose by this package derives from HarnessError so
callers (CLI, service) can catch one type at the boundary and turn it into
an error record without masking genuine bugs.
"""

from __future__ import annotations

__all__ = [
    "HarnessError",
    "ConfigError",
    "RecordIntegrityError",
    "InvalidEpisodeError",
    "PerturbationError",
    "TrainingDivergedError",
    "ProtocolError",
]


class HarnessError(Exception):
    """Base class for all deliberate failures in this package."""


class ConfigError(HarnessError):
    """A configuration value or combination of values is invalid."""


class RecordIntegrityError(HarnessError):
    """A stored record failed checksum or grammar validation.

    Carries the zero-based index of the offending record when known.
    """

    def __init__(self, message: str, record_index: int | None = None):
        if record_index is not None:
            message = f"record {record_index}: {message}"
        super().__init__(message)
        self.record_index = record_index


class InvalidEpisodeError(HarnessError):
    """An episode violates a structural invariant (ordering, phases, labels)."""


class PerturbationError(HarnessError):
    """A perturbation event cannot be applied to the current scene."""


class TrainingDivergedError(HarnessError):
    """Training produced a non-finite loss or parameter."""


class ProtocolError(HarnessError):
    """A live-session message violates the wire protocol."""
