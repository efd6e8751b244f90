"""Structured variational inference with skew decomposable graphical models."""

__version__ = "0.1.0"

from .sparse_graph import SparsityPattern, UnitLowerSparse, build_pattern
from .families import (
    DirectParams,
    CenteredParams,
    CopulaParams,
    NoiseDraw,
    get_family,
)
from .optimizer import Schedule, FitResult, fit, staged_fit

__all__ = [
    "SparsityPattern",
    "UnitLowerSparse",
    "build_pattern",
    "DirectParams",
    "CenteredParams",
    "CopulaParams",
    "NoiseDraw",
    "get_family",
    "Schedule",
    "FitResult",
    "fit",
    "staged_fit",
]
