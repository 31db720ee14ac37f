"""Exact 2-Wasserstein distance between equal-size uniform point clouds.

For two clouds of N points with weights 1/N an optimal coupling is a
permutation, so W_2 is computed exactly: by sorting in one dimension, by the
Hungarian method on the squared-Euclidean cost matrix otherwise.  Exactness
matters because these distances enter stability bounds and rate fits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ConfigError

DEFAULT_SIZE_CAP = 4096


@dataclass(frozen=True)
class Coupling:
    """Permutation pi pairing cloud a with cloud b and its mean transport cost."""

    permutation: np.ndarray
    cost: float  # (1/N) sum_i |a_i - b_{pi(i)}|^2

    def recompute_cost(self, a: np.ndarray, b: np.ndarray) -> float:
        diff = a - b[self.permutation]
        return float(np.mean(np.sum(diff * diff, axis=1)))


def _as_cloud(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ConfigError(f"point cloud must be (N,) or (N, d), got shape {a.shape}")
    return a


def w2_1d(a, b) -> float:
    """Exact W_2 in one dimension: sort both clouds and pair by rank."""
    a, b = _as_cloud(a), _as_cloud(b)
    if a.shape != b.shape or a.shape[1] != 1:
        raise ConfigError(f"w2_1d needs equal-size 1-d clouds, got {a.shape} vs {b.shape}")
    gaps = np.sort(a[:, 0]) - np.sort(b[:, 0])
    return float(np.sqrt(np.mean(gaps * gaps)))


def w2_assignment(a, b, size_cap: int = DEFAULT_SIZE_CAP) -> tuple:
    """Exact W_2 between equal-size clouds in any dimension.

    Returns (distance, Coupling).  O(N^3) worst case; refuses clouds above
    size_cap (subsample, or raise the cap explicitly).
    """
    a, b = _as_cloud(a), _as_cloud(b)
    if a.shape != b.shape:
        raise ConfigError(f"equal-size clouds required, got {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n > size_cap:
        raise ConfigError(
            f"cloud size {n} exceeds the assignment cap {size_cap}; "
            "subsample or pass a larger size_cap"
        )
    sq_a = np.sum(a * a, axis=1)
    sq_b = np.sum(b * b, axis=1)
    cost = np.maximum(sq_a[:, None] + sq_b[None, :] - 2.0 * (a @ b.T), 0.0)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(n, dtype=np.intp)
    perm[rows] = cols
    diff = a - b[perm]
    mean_cost = float(np.mean(np.sum(diff * diff, axis=1)))
    return float(np.sqrt(mean_cost)), Coupling(perm, mean_cost)


def w2(a, b, size_cap: int = DEFAULT_SIZE_CAP) -> float:
    """W_2 distance only, with the fast sorting path in one dimension."""
    a, b = _as_cloud(a), _as_cloud(b)
    if a.shape[1] == 1:
        return w2_1d(a, b)
    return w2_assignment(a, b, size_cap)[0]


def duplicate_points(a, target_size: int) -> np.ndarray:
    """Tile a cloud of N points to target_size = k*N copies (weights stay uniform)."""
    a = _as_cloud(a)
    n = a.shape[0]
    if target_size % n != 0:
        raise ConfigError(
            f"target size {target_size} is not a multiple of the cloud size {n}"
        )
    return np.tile(a, (target_size // n, 1))


def w2_with_duplication(a, b, size_cap: int = DEFAULT_SIZE_CAP) -> float:
    """W_2 between clouds whose sizes divide each other, by duplicating the smaller."""
    a, b = _as_cloud(a), _as_cloud(b)
    if a.shape[0] < b.shape[0]:
        a = duplicate_points(a, b.shape[0])
    elif b.shape[0] < a.shape[0]:
        b = duplicate_points(b, a.shape[0])
    return w2(a, b, size_cap)
