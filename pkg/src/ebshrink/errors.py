"""Exception hierarchy shared by all ebshrink modules."""


class EbshrinkError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(EbshrinkError):
    """Inputs disagree on the number of conditions or samples."""


class NotSymmetric(EbshrinkError):
    """A matrix expected to be symmetric is not, beyond tolerance."""


class NotPSD(EbshrinkError):
    """A covariance matrix has an eigenvalue below the PSD tolerance."""


class WeightsInvalid(EbshrinkError):
    """Mixture weights are out of range or do not sum to one."""


class RankOutOfRange(EbshrinkError):
    """A requested rank is outside 1..R."""


class SingularCovariance(EbshrinkError):
    """A marginal covariance could not be factorized."""


class NotUnitVector(EbshrinkError):
    """A direction vector expected to have unit norm does not."""


class DegenerateCondition(EbshrinkError):
    """A posterior marginal is a point mass where a density was required."""


class EmptySet(EbshrinkError):
    """An operation requires a nonempty selection set."""


class DegenerateComponent(EbshrinkError):
    """A mixture component collapsed during fitting."""


class NoIncrease(EbshrinkError):
    """The EM log-likelihood decreased, which indicates a bug."""


class DimensionTooSmall(EbshrinkError):
    """The operation needs at least two conditions."""


class SingularT(EbshrinkError):
    """A marginal covariance in an information-matrix sum is not PD."""


class SingularInformation(EbshrinkError):
    """The Fisher information matrix is singular (non-identifiable model)."""


class UnknownTarget(EbshrinkError):
    """Unrecognized variance-bound target."""


class ParseError(EbshrinkError):
    """A data, model, or config file could not be parsed."""
