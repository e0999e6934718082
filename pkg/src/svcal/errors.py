"""Exception hierarchy.

Numerical failures derive from :class:`NumericalError` so the CLI can map
them to exit code 2; bad user input stays a plain ``ValueError``.
"""


class NumericalError(RuntimeError):
    """Base class for failures of a numerical routine on admissible input."""


class PricingError(NumericalError):
    """COS pricing failed ("cumulant overflow", "interval adaptation failed",
    "pricing diverged")."""

    def __init__(self, reason: str, index: int | None = None):
        self.reason = reason
        self.index = index
        msg = reason if index is None else f"{reason} (quote index {index})"
        super().__init__(msg)


class ImpliedVolError(NumericalError):
    """Implied volatility inversion failed ("no implied vol", "bracket failure")."""

    def __init__(self, reason: str, index: int | None = None):
        self.reason = reason
        self.index = index
        msg = reason if index is None else f"{reason} (quote index {index})"
        super().__init__(msg)


class DatasetError(NumericalError):
    pass


class TrainingDiverged(NumericalError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}")


class OptimizationError(NumericalError):
    pass
