"""Exception types shared across the solver pipeline."""


class FredmcError(Exception):
    """Base class for solver errors."""


class ContractivityError(FredmcError):
    """The fitted geometric decay rate of the operator powers is >= 1,
    so the Neumann series cannot be certified to converge."""


class BudgetError(FredmcError):
    """The sampling budget is below the minimum (or a realized cost guard
    tripped)."""


class OracleInfeasible(FredmcError):
    """The deterministic quadrature oracle was asked for something outside
    its desk-scale envelope (m > 12, or nested quadrature above 1-D)."""


class NotPSD(FredmcError):
    """Covariance factorization failed even at the maximum jitter ridge."""


class BandTooWide(FredmcError):
    """The non-asymptotic tail bound never drops below the requested
    miss probability on the searched range; report instead of fabricating."""


class UnsupportedDerivative(FredmcError):
    """Derivative solve requested without a kernel t-derivative."""


class ConfigError(FredmcError):
    """Experiment configuration is malformed or out of range."""
