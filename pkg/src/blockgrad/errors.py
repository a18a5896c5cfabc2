"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A call violated an operation's precondition."""


class ConfigError(ValueError):
    """Invalid model, selector, training or experiment configuration."""


class StateError(RuntimeError):
    """Optimizer / selection / snapshot state is out of sync."""


class SpecError(ValueError):
    """Invalid synthetic-data generator specification."""


class TrainingAborted(RuntimeError):
    """Raised when a run hits a non-finite loss.

    ``diagnostics`` carries the step and per-layer gradient norms.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
