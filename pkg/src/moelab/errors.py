"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates an operation's precondition (shape, range, kind)."""


class UnsupportedConfigError(ValueError):
    """A structurally valid but unsupported configuration was requested."""


class InsufficientDataError(ValueError):
    """Not enough usable data points for the requested computation."""


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss; carries the failing step index."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite loss at SGD step {step}")


class EvaluationError(RuntimeError):
    """An objective returned a non-finite value during numerical probing."""


class ConfigError(ValueError):
    """Malformed configuration file or CLI arguments (exit code 2 territory)."""
