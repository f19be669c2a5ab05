"""Dense CRF refinement of per-pixel class probabilities."""

from .crf import (
    CrfParams,
    energy,
    gaussian_filter_bruteforce,
    kernel_eval,
    kernel_features,
    meanfield_infer,
    permutohedral_filter,
    pixel_features,
    potts,
    unary_from_probs,
)
from .lattice import PermutohedralLattice

__all__ = [
    "CrfParams",
    "PermutohedralLattice",
    "energy",
    "gaussian_filter_bruteforce",
    "kernel_eval",
    "kernel_features",
    "meanfield_infer",
    "permutohedral_filter",
    "pixel_features",
    "potts",
    "unary_from_probs",
]
