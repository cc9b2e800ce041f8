"""Probabilistic analysis of expensive simulators: Monte Carlo and
response-surface studies, sensitivity screening and percentile envelopes."""

from .core import (
    InputVariable,
    Origin,
    ParseError,
    ResponseSet,
    SampleMatrix,
    ShapeMismatch,
    StudySpec,
    ValidationError,
    default_study_spec,
    load_study_spec,
    validate_alignment,
)

__version__ = "0.1.0"

__all__ = [
    "InputVariable",
    "Origin",
    "ParseError",
    "ResponseSet",
    "SampleMatrix",
    "ShapeMismatch",
    "StudySpec",
    "ValidationError",
    "default_study_spec",
    "load_study_spec",
    "validate_alignment",
]
