class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class FormatError(ValueError):
    """A file on disk does not match the expected binary or text layout."""


class CapacityExceeded(RuntimeError):
    """The sequential baseline cannot preload every adapter within its budget."""

    def __init__(self, n_adapters, budget):
        super().__init__(
            f"cannot preload {n_adapters} adapters with a budget of {budget}"
        )
        self.n_adapters = n_adapters
        self.budget = budget


class EngineShutdown(RuntimeError):
    """Raised when submitting to an engine that has been shut down."""


class QueueFull(RuntimeError):
    """Admission queue is at its bound."""
