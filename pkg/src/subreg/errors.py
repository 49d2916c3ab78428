"""Exception hierarchy shared across the package."""


class SubregError(Exception):
    """Base class for all library errors."""


class RankDeficient(SubregError):
    """Matrix does not have the full column rank an operation requires."""


class ConvergenceFailure(SubregError):
    """Iterative eigensolver exhausted its iteration budget."""


class UnstableSystem(SubregError):
    """System matrix has an eigenvalue with non-negative real part."""


class NonFiniteState(SubregError):
    """Time integration produced NaN or infinity."""


class CutLocus(SubregError):
    """Subspace pair lies on (or too close to) the Grassmann cut locus."""


class ZeroVelocity(SubregError):
    """Tangent vector is identically zero where a direction is needed."""


class SingularCoarseMatrix(SubregError):
    """Coarse projection of the operator is numerically singular."""


class MaxIterations(SubregError):
    """Iterative linear solver hit its iteration cap before the tolerance."""


class CflViolation(SubregError):
    """Advective CFL bound violated during explicit transport."""


class NonPositiveCoefficient(SubregError):
    """Diffusion coefficient field contains non-positive values."""


class DivergenceDetected(SubregError):
    """Training loss became non-finite."""


class DatasetFormatError(SubregError):
    """Base class for on-disk dataset container problems."""


class FormatVersionMismatch(DatasetFormatError):
    """Dataset container was written with an unsupported format version."""


class CorruptHeader(DatasetFormatError):
    """Dataset container header is missing, malformed, or has a wrong magic."""


class TruncatedPayload(DatasetFormatError):
    """Dataset payload file is shorter than the header promises."""


class ConfigError(SubregError):
    """Invalid experiment configuration."""
