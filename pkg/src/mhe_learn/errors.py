"""Exception types shared across the package."""


class MheLearnError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MheLearnError):
    """Invalid configuration: dimension mismatches, bad files, unknown options."""


class SamplingError(MheLearnError):
    """Rejection sampling failed to produce an accepted draw within the cap."""


class NumericalError(MheLearnError):
    """A numerical-domain violation: non-SPD input, singular innovation, etc."""


class EstimationError(MheLearnError):
    """The estimator could not produce an estimate (e.g. unrecoverable infeasibility)."""


class EpochError(MheLearnError):
    """A learning epoch failed after exhausting its retry budget."""
