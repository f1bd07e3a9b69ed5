"""Exception types shared across the package."""


class KfcompError(Exception):
    """Base class for all kfcomp errors."""


class NotPositiveSemidefinite(KfcompError):
    """A matrix required to be PSD has an eigenvalue below tolerance."""


class NonFiniteInput(KfcompError):
    """An input array contains NaN or infinity."""


class NonFiniteEvaluation(KfcompError):
    """A map evaluation produced NaN or infinity."""


class DimensionMismatch(KfcompError):
    """Array shapes are mutually inconsistent."""


class UnknownModel(KfcompError):
    """Requested registry name does not exist."""


class NegativeBeta(KfcompError):
    """beta < 0 for an estimator that requires beta >= 0."""


class BetaOutOfRange(KfcompError):
    """beta outside the range that keeps the estimated covariance PSD."""


class NotQuadratic(KfcompError):
    """Operation requires an exactly quadratic map."""


class NotOrthogonal(KfcompError):
    """Matrix fails the orthogonality check."""


class SingularInnovation(KfcompError):
    """Innovation covariance could not be factorized even after jitter."""


class DegenerateCase(KfcompError):
    """Scan objective has no interior minimizer (flat or edge-bound)."""


class NonPositiveEntry(KfcompError):
    """Geometric mean requested over non-positive entries."""


class ConfigError(KfcompError):
    """Invalid or malformed run configuration."""
