"""Exception types shared across the package.

All user-facing failures derive from ``ValueError`` (bad input) or
``RuntimeError`` (broken internal state) so callers can catch broadly.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateInputError(ValueError):
    """An input lies on a singular point (e.g. a zero-norm vector)."""


class ParameterError(ValueError):
    """A scalar parameter (index, count, threshold) is out of range."""


class ConfigurationError(ValueError):
    """Model or run configuration is internally inconsistent."""


class FormatError(ValueError):
    """A file or record does not follow its documented format."""


class ContractError(RuntimeError):
    """An API was called in a state its contract forbids."""


class InvariantError(RuntimeError):
    """An internal invariant was violated; indicates a bug, not bad input."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)
