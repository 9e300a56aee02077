"""Exception types shared across the toolkit."""


class DifftokError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(DifftokError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class DomainError(DifftokError, ValueError):
    """A scalar argument lies outside its documented domain."""


class SingularityError(DifftokError, ArithmeticError):
    """A schedule quantity or conversion matrix is singular at this time."""


class ConfigurationError(DifftokError, ValueError):
    """A configuration value, key, or combination is invalid."""


class EvaluationError(DifftokError, RuntimeError):
    """A metric or numerical check could not be evaluated."""


class TrainingDiverged(DifftokError, RuntimeError):
    """Training produced a non-finite loss; carries step diagnostics."""

    def __init__(self, message: str, *, step: int, diagnostics: dict):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics


class CheckpointError(DifftokError, RuntimeError):
    """A checkpoint file is missing, corrupt, or fails its checksum."""
