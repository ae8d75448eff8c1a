"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition on an argument or object state was violated."""


class DimensionError(ContractError):
    """Operand shapes do not conform for the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class TrainingError(RuntimeError):
    """Optimization diverged or failed; carries the iteration/task index."""

    def __init__(self, message, iteration=None, task=None):
        super().__init__(message)
        self.iteration = iteration
        self.task = task


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, message, key=""):
        super().__init__(message)
        self.key = key
