"""Exception hierarchy. Every externally visible failure mode gets its own class
so the CLI can map them to distinct exit codes."""


class SemfieldError(Exception):
    """Base class for all engine errors."""


class ConfigError(SemfieldError):
    """Invalid or unknown configuration keys/values."""


class ContractError(SemfieldError):
    """A documented precondition was violated by the caller."""


class GenerationError(SemfieldError):
    """Scene generation could not satisfy its constraints (e.g. embedding
    rejection sampling exhausted)."""


class DatasetFormatError(SemfieldError):
    """Dataset directory is malformed: unparsable manifest or scene file."""


class DatasetVersionError(DatasetFormatError):
    """Dataset carries an unsupported version string."""


class DatasetConsistencyError(SemfieldError):
    """Dataset manifest and binary arrays disagree (truncated blobs, length
    mismatch)."""


class CheckpointFormatError(SemfieldError):
    """Checkpoint file has a bad header, wrong version string, or truncated
    parameter blob."""


class TrainingDivergedError(SemfieldError):
    """Loss became non-finite during optimization."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class UnknownLabelError(SemfieldError, KeyError):
    """Lookup of an object label that does not exist in the scene."""
