"""Exception types shared across the package."""


class FlapError(Exception):
    """Base class for all package errors."""


class EpisodeOverError(FlapError):
    """Raised when stepping an environment past its step budget."""


class DatasetFormatError(FlapError):
    """Raised for malformed, truncated or corrupted dataset / checkpoint files."""


class PlanningError(FlapError):
    """Raised when the planner cannot produce a finite-cost plan."""


class CalibrationError(FlapError):
    """Raised when there is too little data to calibrate a threshold."""


class ConfigError(FlapError):
    """Raised for unknown keys, out-of-range values or mismatched dimensions."""


class NonFiniteLossError(FlapError):
    """Raised when a training step produces a NaN or infinite loss.

    The ``report`` attribute carries the per-term values at the failing step.
    """

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}
