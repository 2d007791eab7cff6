"""Exception hierarchy shared by all freqmoe modules."""


class FreqMoEError(Exception):
    """Base class for all library errors."""


class ValidationError(FreqMoEError, ValueError):
    """Input rejected before any work was done (CLI exit code 1)."""


class ConfigurationError(ValidationError):
    """Invalid architecture, layout or training configuration."""


class DataError(ValidationError):
    """Non-finite or otherwise unusable numerical input."""


class ShapeError(ValidationError):
    """Array shapes disagree with each other or with a configuration."""


class ArchitectureError(ValidationError):
    """Checkpoint kind or architecture does not fit the requested use."""


class IntegrityError(ValidationError):
    """A file failed magic, version, manifest or checksum validation."""


class TrainingError(FreqMoEError, RuntimeError):
    """Training aborted (NaN loss or gradient, exhausted dataset)."""


class VerificationError(FreqMoEError, RuntimeError):
    """A verification report exceeded its tolerance (CLI exit code 2)."""
