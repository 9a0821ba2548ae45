"""Sequence-to-vector pooling for frame/step-level embedding sequences.

Two reductions are provided: plain temporal mean pooling and statistical
pooling, which concatenates the per-dimension mean with the population
standard deviation (divisor T, no epsilon under the square root).

Accumulation sorts each column before summing so both reductions are
exactly permutation invariant over rows, not merely up to float
reordering noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding_io import EmbeddingMatrix


@dataclass
class PooledVector:
    data: np.ndarray  # float64, length D (mean) or 2D (statistical)
    kind: str  # "mean" | "statistical"


def _as_matrix(seq) -> np.ndarray:
    values = seq.values if isinstance(seq, EmbeddingMatrix) else np.asarray(seq)
    if values.ndim != 2 or values.shape[0] < 1:
        raise ValueError("pooling needs a non-empty 2-D sequence")
    return values.astype(np.float64)

def _column_sum(x: np.ndarray) -> np.ndarray:
    # Sorted accumulation: identical multisets sum to identical floats.
    return np.sum(np.sort(x, axis=0), axis=0)


def mean_pool(seq) -> PooledVector:
    """Temporal mean over rows: out[j] = (1/T) sum_t seq[t, j]."""
    x = _as_matrix(seq)
    return PooledVector(data=_column_sum(x) / x.shape[0], kind="mean")


def statistical_pool(seq) -> PooledVector:
    """Concatenated per-dimension mean and population std over rows."""
    x = _as_matrix(seq)
    t = x.shape[0]
    mu = _column_sum(x) / t
    var = _column_sum((x - mu) ** 2) / t
    sigma = np.sqrt(var)
    return PooledVector(data=np.concatenate([mu, sigma]), kind="statistical")
