"""Certified machine unlearning via block-wise noisy fine-tuning."""

from . import accounting, audit, datasets, divergence, engine, harness, model, subspace
from .errors import (
    DomainError,
    FormatError,
    InfeasibleBudget,
    InfeasibleNoise,
    NumericalError,
    UnlearnError,
)

__all__ = [
    "accounting",
    "audit",
    "datasets",
    "divergence",
    "engine",
    "harness",
    "model",
    "subspace",
    "DomainError",
    "FormatError",
    "InfeasibleBudget",
    "InfeasibleNoise",
    "NumericalError",
    "UnlearnError",
]

__version__ = "0.1.0"
