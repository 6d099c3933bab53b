"""Shared exception types for the ubam pipeline."""


class UbamError(Exception):
    """Base class for all pipeline errors."""


class DomainError(UbamError, ValueError):
    """An argument is outside its documented domain."""


class ContractViolation(UbamError):
    """A cross-module contract was violated (e.g. overlapping subjects)."""


class ConfigError(UbamError):
    """Bad or inconsistent configuration / missing checkpoint."""


class MissingArtifactError(UbamError):
    """A required upstream artifact (manifest, checkpoint, store) is absent."""


class NumericalFailure(UbamError):
    """Training diverged (NaN/Inf loss)."""


class NoMovingSubjectError(UbamError):
    """ROI tracking found no foreground motion above threshold."""
