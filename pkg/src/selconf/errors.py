"""Exception types shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class SelconfError(Exception):
    exit_code = 1


class ValidationError(SelconfError, ValueError):
    exit_code = 2


class RecordFormatError(ValidationError):
    """A record line could not be parsed or failed validation."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InfeasibleThresholdError(SelconfError):
    """No threshold on the validation table meets the target risk."""

    exit_code = 3


class NumericError(SelconfError, ArithmeticError):
    exit_code = 4
