"""Exception hierarchy shared across the package.

Each family carries the process exit code the command line maps it to.
"""


class MriInstabilityError(Exception):
    exit_code = 1


class SizingError(MriInstabilityError, ValueError):
    """Tensor dimensions are not usable (e.g. not a power of two)."""


class ShapeMismatchError(MriInstabilityError, ValueError):
    pass


class TensorFormatError(MriInstabilityError):
    """Base class for TNSR load failures."""


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class ConfigError(MriInstabilityError, ValueError):
    exit_code = 2


class EmptyInputError(ConfigError):
    """An input split or CSV set has no rows to work on."""


class DatasetError(MriInstabilityError):
    pass


class DependencyError(MriInstabilityError):
    """A required upstream artifact (dataset, model, CSV) is missing."""

    exit_code = 3


class DivergenceError(MriInstabilityError, ArithmeticError):
    """A numerical loop produced non-finite values.

    ``step`` is the iteration index at which it was detected.
    """

    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingDivergenceError(DivergenceError):
    pass


class SamplerDivergenceError(DivergenceError):
    pass


class AttackDivergenceError(DivergenceError):
    pass


class GradientError(MriInstabilityError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, repeated backward)."""
