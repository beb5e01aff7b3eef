"""Exception types shared across the package."""


class MadkitError(Exception):
    """Base class for all package errors."""


class DescriptorError(MadkitError):
    """Architecture descriptor is internally inconsistent."""


class InputError(MadkitError):
    """An input tensor, batch, or vector violates a precondition."""


class CapacityError(MadkitError):
    """A size limit was exceeded (dense-Hessian cap, split sizes, ...)."""


class FormatError(MadkitError):
    """A binary or text file does not parse.

    Carries the byte offset of the first offending field when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(MadkitError):
    """Training diverged. Carries the epoch index where loss went non-finite."""

    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class ChainDivergenceError(MadkitError):
    """The sampling chain produced a non-finite parameter vector."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class DegenerateTraceError(MadkitError):
    """A trace has (numerically) zero variance and no correlation is defined."""


class DegenerateGradientError(MadkitError):
    """A gradient has (numerically) zero norm and no energy profile is defined."""


class ParameterError(MadkitError):
    """An operation parameter is out of range for the given data."""


class ConfigError(MadkitError):
    """An experiment config file is malformed or contains unknown keys."""
