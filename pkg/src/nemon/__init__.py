"""Implicit neural networks with non-Euclidean contraction guarantees."""

from .fixedpoint import IterationConfig, IterationTrace, average_iteration
from .measures import NormKind, NormSpec, matrix_measure, matrix_norm, vector_norm
from .network import Activation, ImplicitNetwork, forward, forward_batch, lipschitz_bounds

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "ImplicitNetwork",
    "IterationConfig",
    "IterationTrace",
    "NormKind",
    "NormSpec",
    "average_iteration",
    "forward",
    "forward_batch",
    "lipschitz_bounds",
    "matrix_measure",
    "matrix_norm",
    "vector_norm",
]
