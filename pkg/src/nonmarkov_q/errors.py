"""Exception hierarchy shared across the package."""


class NonMarkovQError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(NonMarkovQError, ValueError):
    """Malformed or inconsistent configuration (shapes, indices, files)."""


class FilteringDegeneracyError(NonMarkovQError):
    """An observation had zero probability under the current belief."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class AnalysisRejection(NonMarkovQError):
    """An analysis refused its input (reducible chain, budget exceeded, ...)."""


class NumericalError(NonMarkovQError):
    """A linear solve or iteration did not reach its stated accuracy."""
