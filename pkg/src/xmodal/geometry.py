"""Unit-hypersphere primitives shared by every other module.

All functions are pure, operate on float64, and accept either single
vectors or row-stacked batches where noted.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionMismatch, NearZeroNorm

EPS_NORM = 1e-12


def normalize(v, eps: float = EPS_NORM) -> np.ndarray:
    """Project onto the unit sphere: v / ||v||_2, row-wise on 2-D input.

    Raises NearZeroNorm if any row norm is <= eps.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] < 1:
        raise DimensionMismatch("expected a vector with at least one component")
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        worst = float(norms.min())
        raise NearZeroNorm(f"norm {worst:.3e} <= {eps:.1e}; cannot normalize")
    return arr / norms


def cosine(u, v) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1]."""
    ua = np.asarray(u, dtype=np.float64)
    va = np.asarray(v, dtype=np.float64)
    if ua.shape != va.shape or ua.ndim != 1:
        raise DimensionMismatch(f"incompatible shapes {ua.shape} and {va.shape}")
    return float(np.clip(ua @ va, -1.0, 1.0))


def angle(u, v) -> float:
    """Angle in radians between two unit vectors (diagnostics only)."""
    return math.acos(cosine(u, v))


def pairwise_sq_dists(X) -> np.ndarray:
    """Squared Euclidean distances between unit vectors: 2 - 2*x_a.x_b.

    Returns a symmetric (P, P) matrix with zero diagonal and entries
    clipped to [0, 4].
    """
    try:
        arr = np.asarray(X, dtype=np.float64)
    except (ValueError, TypeError):
        raise DimensionMismatch("expected a list of equal-length vectors") from None
    if arr.ndim != 2:
        raise DimensionMismatch("expected a list of equal-length vectors")
    if arr.shape[0] < 1:
        raise DimensionMismatch("need at least one vector")
    gram = arr @ arr.T
    dists = 2.0 - 2.0 * gram
    dists = 0.5 * (dists + dists.T)  # force exact symmetry
    np.fill_diagonal(dists, 0.0)
    return np.clip(dists, 0.0, 4.0)
