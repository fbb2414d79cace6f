"""Exception hierarchy shared across the package."""


class BodyReshapeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BodyReshapeError):
    """Inputs violate a documented precondition (shape/resolution/range)."""


class ConfigurationError(BodyReshapeError):
    """A required configuration item is missing or inconsistent."""


class ModelIntegrityError(BodyReshapeError):
    """The loaded body model violates a structural invariant."""


class CalibrationError(BodyReshapeError):
    """Semantic calibration is missing, stale, or rank-deficient."""


class FitDivergedError(BodyReshapeError):
    """Optimization produced a non-finite energy.

    Carries the last finite parameter state so callers can salvage it.
    """

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class DependencyError(BodyReshapeError):
    """An external adapter (detector, segmenter, estimator, embedder) is unavailable."""


class NotReadyError(BodyReshapeError):
    """Weights or session state required for the call are not loaded yet."""


class TrainingDivergedError(BodyReshapeError):
    """Training hit a non-finite loss; carries the last checkpoint path."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class NumericError(BodyReshapeError):
    """A numerical routine failed; message includes a condition report."""
