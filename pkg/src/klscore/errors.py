"""Exception hierarchy.

Config problems and numerical failures are kept distinct so the CLI can map
them to stable exit codes (2 and 3 respectively).
"""


class KlscoreError(Exception):
    """Base class for all package errors."""


class ConfigError(KlscoreError):
    """Invalid configuration, parameters, or inputs detected before computing."""


class DomainError(ConfigError):
    """Argument outside the mathematical domain of an operation."""


class CapacityError(ConfigError):
    """Problem size exceeds a hard structural limit (e.g. outcome space too large)."""


class NumericError(KlscoreError):
    """A numerical procedure failed to meet its contract."""


class EvaluationError(NumericError):
    """A user-supplied function returned a non-finite value."""


class InfeasiblePolytopeError(NumericError):
    """The constraint polytope is empty or has no usable interior."""


class ModelConsistencyError(NumericError):
    """A model produced values violating its own invariants (e.g. nu outside [0,1])."""


class DegenerateModelError(NumericError):
    """A model limit process collapsed (e.g. zero mass where positive mass is required)."""


class KktResidualError(NumericError):
    """Optimality conditions could not be satisfied to the requested tolerance."""


class RankDeficiencyError(NumericError):
    """Active constraint representers are rank-deficient beyond repair."""


class SingularDirectionError(NumericError):
    """A score component has (numerically) zero variance; names the coordinate."""


class InstabilityError(NumericError):
    """Too many rejected draws while estimating a smoothed gradient."""


class UnseenCovariateError(KlscoreError):
    """A cell-mean estimator was queried at a covariate value never observed."""


class ExtrapolationError(KlscoreError):
    """A series estimator was queried outside the covariate range it was fit on."""


class OverparameterizationError(ConfigError):
    """Basis dimension at least as large as the sample size."""


class EmptyConfidenceSetError(KlscoreError):
    """A confidence set contains no accepted point where one is required."""
