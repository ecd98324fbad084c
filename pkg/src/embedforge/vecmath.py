"""Dense vector kernels: normalization, cosine matrices, deterministic top-k.

Vectors are 1-D float64 numpy arrays, score matrices 2-D float64. All
functions are pure and safe to call from any number of workers. Everything
metric-facing stays in 64-bit floats so downstream oracle comparisons hold
at tight tolerances.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, ZeroVector


def as_vector(values) -> np.ndarray:
    """Validate and convert to a 1-D float64 vector (finite, dimension > 0)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionMismatch(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite entries")
    return v


def l2_normalize(values) -> np.ndarray:
    """Scale a vector to unit Euclidean norm, preserving direction.

    Raises ZeroVector for an all-zero input. The result is a fixpoint:
    normalizing it again returns it bitwise unchanged.
    """
    v = as_vector(values)
    if float(np.max(np.abs(v))) == 0.0:
        raise ZeroVector("cannot normalize the zero vector")
    # Iterate until the computed norm is exactly 1.0 so the operation is
    # bitwise idempotent; one or two passes suffice in practice.
    for _ in range(32):
        norm = _robust_norm(v)
        if norm == 1.0:
            return v
        v = v / norm
    return v


def _robust_norm(v: np.ndarray) -> float:
    """Euclidean norm with pre-scaling, immune to under/overflow of v**2."""
    peak = float(np.max(np.abs(v)))
    scaled = v / peak
    return peak * float(np.sqrt(np.dot(scaled, scaled)))


def sim_matrix(queries: Sequence[np.ndarray], candidates: Sequence[np.ndarray]) -> np.ndarray:
    """Cosine similarity of every query against every candidate.

    Unit norm is enforced here rather than assumed, so entry (i, j) is the
    cosine of query i and candidate j regardless of input scaling.
    """
    if len(queries) == 0 or len(candidates) == 0:
        raise DimensionMismatch("sim_matrix needs at least one query and one candidate")
    q = np.stack([l2_normalize(v) for v in queries])
    c = np.stack([l2_normalize(v) for v in candidates])
    if q.shape[1] != c.shape[1]:
        raise DimensionMismatch(
            f"query dimension {q.shape[1]} != candidate dimension {c.shape[1]}"
        )
    return q @ c.T


def top_k(scores: Sequence[float], k: int) -> list[tuple[int, float]]:
    """Highest-k (index, score) entries, score descending, ties by ascending index.

    k larger than the input simply returns everything; the ordering is fully
    deterministic across platforms.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise DimensionMismatch(f"expected 1-D scores, got shape {s.shape}")
    n = s.size
    if n == 0:
        return []
    # lexsort is stable: primary key descending score, secondary ascending index.
    order = np.lexsort((np.arange(n), -s))
    take = order[: min(k, n)]
    return [(int(i), float(s[i])) for i in take]
