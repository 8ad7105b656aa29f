"""Exception hierarchy shared by every module.

The command-line entry point maps each family onto an exit code:
configuration problems exit 1, data problems exit 2 and numerical
failures exit 3.
"""


class DfcError(Exception):
    """Base class for all package errors."""


class ConfigError(DfcError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class ContractError(DfcError, ValueError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Operands have incompatible shapes."""


class DataError(DfcError):
    """Input data is missing, malformed or degenerate."""


class DegenerateColumnError(DataError):
    """A column has zero variance inside a correlation window."""

    def __init__(self, roi, message=None):
        self.roi = roi
        super().__init__(message or f"ROI {roi} has zero variance in the window")


class NumericalError(DfcError, ArithmeticError):
    """A computation produced NaN or infinite values."""
