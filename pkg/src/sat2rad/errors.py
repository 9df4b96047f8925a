"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes (validation 2, configuration 3,
archive/I-O 4), so commands can be scripted against reliably.
"""


class Sat2RadError(Exception):
    """Base class for all package errors."""


class ValidationError(Sat2RadError, ValueError):
    """Bad input data or arguments: shape mismatches, odd dimensions, NaNs."""


class ConfigurationError(Sat2RadError):
    """Missing or inconsistent run configuration (checkpoints, config keys)."""


class ArchiveError(Sat2RadError):
    """Problems reading or writing an event archive."""


class MissingEventError(ArchiveError):
    """A requested event id is not present in the archive."""


class MissingModalityError(ArchiveError):
    """An event exists but lacks one of the required channels."""


class CorruptRecordError(ArchiveError):
    """An event record is present but unreadable or internally inconsistent."""


class TrainingDivergedError(Sat2RadError):
    """Loss became non-finite; a diagnostic checkpoint is written before raising."""
