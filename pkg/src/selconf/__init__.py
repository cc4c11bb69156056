"""Selective prediction and confidence refinement over scored prediction records."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    InfeasibleThresholdError,
    NumericError,
    RecordFormatError,
    SelconfError,
    ValidationError,
)

__all__ = [
    "InfeasibleThresholdError",
    "NumericError",
    "RecordFormatError",
    "SelconfError",
    "ValidationError",
    "__version__",
]
