"""
Error types for VisionGuard.

Every failure the toolkit raises on purpose derives from VisionGuardError so the
CLI can map it to an exit code.
"""
from typing import Optional

import numpy as np

__all__ = [
    'VisionGuardError', 'InvalidInputError', 'InvalidArgumentError', 'SaturationError',
    'OptimizationDivergedError', 'FitError', 'DegenerateInputError', 'IntegrityError',
    'FormatError', 'BadMagicError', 'TruncatedFileError', 'CountMismatchError', 'ConfigError',
]


class VisionGuardError(Exception):
    """Base class for all VisionGuard errors."""


class InvalidInputError(VisionGuardError):
    """Input data has the wrong shape, dimension or range."""


class InvalidArgumentError(VisionGuardError, ValueError):
    """A parameter is outside its allowed domain."""


class SaturationError(VisionGuardError):
    """JSMA ran out of unsaturated features before reaching the target class."""

    def __init__(self, message: str, partial: np.ndarray):
        super().__init__(message)
        self.partial = partial


class OptimizationDivergedError(VisionGuardError):
    """The CW objective became non-finite."""


class FitError(VisionGuardError):
    """KDE fitting failed; class_index names the empty class."""

    def __init__(self, message: str, class_index: Optional[int] = None):
        super().__init__(message)
        self.class_index = class_index


class DegenerateInputError(VisionGuardError):
    """ROC construction needs at least one positive and one negative."""


class IntegrityError(VisionGuardError):
    """Dangling references or checksum / provenance mismatches."""


class FormatError(VisionGuardError):
    """Malformed binary file."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class ConfigError(VisionGuardError):
    """Run configuration failed validation."""
