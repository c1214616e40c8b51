"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid model, payoff or solver configuration."""


class CorrelationError(ConfigurationError):
    """The requested correlation root is singular or ill-defined."""

    def __init__(self, d, gamma, reason):
        self.d = d
        self.gamma = gamma
        super().__init__(f"cannot build correlation root for d={d}, gamma={gamma}: {reason}")


class DomainError(ValueError):
    """A closed-form quantity was requested outside its domain (e.g. at maturity)."""


class TrainingError(RuntimeError):
    """Training diverged or produced non-finite values.

    ``step`` is the optimisation step at which the failure was detected and
    ``history`` (when available) holds the records collected before it.
    """

    def __init__(self, message, step, history=None):
        self.reason = message
        self.step = step
        self.history = history
        super().__init__(message if step is None else f"step {step}: {message}")
