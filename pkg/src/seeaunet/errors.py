"""Exception types raised across the package."""


class SeeaError(Exception):
    """Base class for all package errors."""


class ShapeError(SeeaError, ValueError):
    """Incompatible tensor shapes passed to an operation."""


class ConfigError(SeeaError, ValueError):
    """Invalid configuration. ``problems`` lists every violated constraint."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ValidationError(SeeaError, ValueError):
    """Input data outside the domain an operation accepts."""


class StateError(SeeaError, RuntimeError):
    """Operation called on an object in the wrong state (e.g. missing running stats)."""


class TrainingError(SeeaError, RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""


class CheckpointError(SeeaError, IOError):
    """Checkpoint file is corrupt, truncated or of an unsupported version."""


class DatasetError(SeeaError, IOError):
    """Dataset directory does not satisfy the layout contract."""
