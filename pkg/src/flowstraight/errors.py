"""Exception hierarchy shared by the library and the CLI.

The CLI maps these to process exit codes: configuration problems exit 2,
data/format problems exit 3, numeric failures exit 4.
"""


class FlowstraightError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(FlowstraightError):
    """Invalid configuration: bad values, unknown keys, unusable specs."""

    exit_code = 2


class DataError(FlowstraightError):
    """Invalid or unusable data (empty datasets, inconsistent records)."""

    exit_code = 3


class FormatError(DataError):
    """A binary or text artifact violates its documented format."""


class NumericError(FlowstraightError):
    """Numerical failure during computation."""

    exit_code = 4


class DivergenceError(NumericError):
    """A state or loss became non-finite.

    ``partial`` optionally carries the last finite object (solver run,
    checkpoint snapshot) so callers can salvage it.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class StiffnessError(DivergenceError):
    """Adaptive step size underflowed the minimum step."""


class NonFiniteGradError(NumericError):
    """An optimizer update was rejected because gradients were not finite."""
