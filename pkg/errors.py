"""
Exceptions raised across the deep contextual biasing toolkit
"""

from typing import Optional


class DeepClasError(Exception):
    """Base class for every error raised by this package"""


class DimensionError(DeepClasError, ValueError):
    """Shapes of vectors or matrices do not conform"""


class LengthError(DeepClasError, ValueError):
    """A sequence that must be non-empty (or of a given length) is not"""


class NumericError(DeepClasError, ValueError):
    """Non-finite values where finite ones are required"""


class ConfigError(DeepClasError, ValueError):
    """Invalid or inconsistent configuration"""


class VocabularyError(DeepClasError, ValueError):
    """Token or symbol outside the vocabulary"""


class AlignmentError(DeepClasError, ValueError):
    """Paired sequences (steps, targets, ids) do not line up"""


class LoadError(DeepClasError, ValueError):
    """A loaded resource violates its contract (e.g. duplicate phrases)"""


class ContractError(DeepClasError, ValueError):
    """Caller violated a documented precondition"""


class ParseError(DeepClasError, ValueError):
    """Malformed line in a data file"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class DeterminismError(DeepClasError, RuntimeError):
    """A function expected to be deterministic returned different results"""


class DivergenceError(DeepClasError, RuntimeError):
    """Training produced a non-finite loss"""
