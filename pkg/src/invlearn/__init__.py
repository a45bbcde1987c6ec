"""Inverse learning for denoising recommendation with extremely sparse feedback.

Inverse Dual Loss softly annotates sampled unlabeled user-item pairs, and
Inverse Gradient picks among direct, inverse and skipped dual-loss updates by
checking each candidate against a held-out slice of the training labels.
"""

from invlearn.errors import (
    ConfigError,
    DataError,
    EmptyDatasetError,
    EmptyInputError,
    ExhaustionError,
    InsufficientDataError,
    InvLearnError,
    NumericError,
    ParseError,
    ShapeError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "EmptyDatasetError",
    "EmptyInputError",
    "ExhaustionError",
    "InsufficientDataError",
    "InvLearnError",
    "NumericError",
    "ParseError",
    "ShapeError",
    "UndefinedMetricError",
    "__version__",
]
