"""Sparse soft-label codec.

A teacher distribution over C classes is reduced to its top-K entries for
storage and reconstructed later by spreading the leftover probability mass
uniformly over the classes that were not kept.  Reconstruction therefore acts
like label smoothing whose smoothing weight is whatever mass the teacher put
outside its top K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SparseLabel:
    """Top-K slice of a distribution: class indices and their probabilities.

    ``values`` are kept in rank order (non-increasing); ties at the cut rank
    are broken toward the lower class index so the result is reproducible.
    """

    indices: np.ndarray  # int64, shape (K,)
    values: np.ndarray   # float64, shape (K,)

    @property
    def k(self) -> int:
        return int(self.indices.shape[0])

    def mass(self) -> float:
        """Total stored probability."""
        return float(self.values.sum())


def normalize(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction, in float64.

    Raises ValueError for an empty class axis, non-finite logits, or a
    non-positive temperature.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise ValueError("empty class axis")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sparsify(dense: np.ndarray, k: int) -> SparseLabel:
    """Keep the k largest probabilities with their class indices.

    Ties are broken by lower class index.  Requires ``1 <= k <= C``.
    """
    dense = np.asarray(dense, dtype=np.float64)
    c = dense.shape[-1]
    if k < 1:
        raise ValueError("K must be positive")
    if k > c:
        raise ValueError("K exceeds class count")
    # Sort by (-value, index): stable rank order with deterministic ties.
    order = np.lexsort((np.arange(c), -dense))
    idx = order[:k]
    return SparseLabel(indices=idx.astype(np.int64), values=dense[idx].copy())


def densify(sparse: SparseLabel, c: int) -> np.ndarray:
    """Reconstruct a full distribution from a sparse label.

    Stored entries keep their probability; each of the remaining C-K classes
    receives ``(1 - stored mass) / (C - K)``.  When K == C there is nothing to
    smooth and the stored values are returned as-is.  A tiny negative residual
    from rounding is clamped to zero so entries stay in [0, 1].
    """
    indices = np.asarray(sparse.indices)
    values = np.asarray(sparse.values, dtype=np.float64)
    k = indices.shape[0]
    if k > c:
        raise ValueError("K exceeds class count")
    if indices.size and int(indices.max()) >= c:
        raise ValueError("index out of range")
    if indices.size and int(indices.min()) < 0:
        raise ValueError("index out of range")
    total = float(values.sum())
    if total > 1.0 + 1e-6:
        raise ValueError("invalid probability mass")
    out = np.zeros(c, dtype=np.float64)
    if k < c:
        out[:] = max(0.0, (1.0 - total)) / (c - k)
    out[indices] = values
    return out


def quantize_values(values: np.ndarray, precision: str) -> np.ndarray:
    """Round stored probabilities to their on-disk precision.

    ``half`` is the storage default; ``single`` keeps float32.  Returned as
    float64 after the round-trip so downstream math is uniform.

    Round-to-nearest can push the total mass of a near-saturated label a few
    ulps above 1, which would poison densify's residual; any overshoot is
    repaired by stepping the largest entries down one ulp at a time, keeping
    every stored value within half-precision rounding of its input.
    """
    if precision == "half":
        dt = np.float16
    elif precision == "single":
        dt = np.float32
    else:
        raise ValueError(f"unknown value precision: {precision!r}")
    q = np.asarray(values, dtype=dt)
    while float(q.astype(np.float64).sum()) > 1.0:
        j = int(np.argmax(q))
        q[j] = np.nextafter(q[j], dt(0.0), dtype=dt)
    return q.astype(np.float64)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
