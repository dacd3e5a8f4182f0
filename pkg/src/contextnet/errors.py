"""Exception hierarchy shared by all contextnet modules."""


class ContextNetError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(ContextNetError, ValueError):
    """Shapes, strides or configuration values that do not fit together."""


class NumericError(ContextNetError, ArithmeticError):
    """A computation would produce a non-finite or undefined result."""


class UsageError(ContextNetError, ValueError):
    """An API was called outside its contract (e.g. non-scalar loss)."""


class EmptyInputError(ContextNetError, ValueError):
    """Zero-length input where at least one frame is required."""


class InvalidLabelError(ContextNetError, ValueError):
    """A label sequence contains the blank symbol or an out-of-range id."""


class UnsupportedFormatError(ContextNetError, ValueError):
    """Audio or feature file that this package cannot read."""


class UnsupportedRateError(ContextNetError, ValueError):
    """Audio at a sample rate other than 16 kHz."""


class TrainingDiverged(ContextNetError, RuntimeError):
    """Loss became NaN or infinite during training."""

    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss
