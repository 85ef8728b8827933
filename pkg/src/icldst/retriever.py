"""Nearest-neighbour retrieval over an embedding store.

Stores hold unit-length float32 vectors, so the dot product of a
unit-length query against every row is the cosine similarity. Ranking is
by descending score; exact ties resolve to the row that comes first in
the store, which is ascending sample_id order because stores sort their
rows on construction. That rule is what makes runs reproducible across
the compiled and pure kernels.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .embedder import EmbeddingStore


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked neighbours: (sample_id, cosine score), most similar first."""

    neighbors: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(sid for sid, _ in self.neighbors)

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(score for _, score in self.neighbors)

    def top(self, k: int) -> "RetrievalResult":
        """Prefix of the ranking; ``retrieve(q, s, k)`` equals ``retrieve(q, s, kmax).top(k)``."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        return RetrievalResult(self.neighbors[:k])

    def __len__(self) -> int:
        return len(self.neighbors)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity between two vectors of equal dimension."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(a @ b) / (norm_a * norm_b)


def score_all(query: np.ndarray, store: EmbeddingStore) -> np.ndarray:
    """Float32 cosine scores of ``query`` against every store row, in row order."""
    query = np.ascontiguousarray(query, dtype=np.float32).ravel()
    if query.shape[0] != store.dimension:
        raise ValueError(
            f"query dimension {query.shape[0]} does not match store dimension {store.dimension}"
        )
    norm = float(np.linalg.norm(query.astype(np.float64)))
    if norm == 0.0:
        raise ValueError("cannot retrieve with a zero query vector")
    if abs(norm - 1.0) > 1e-5:
        query = (query.astype(np.float64) / norm).astype(np.float32)
    return _kernels.dot_scores(store.matrix, query)


def retrieve(query: np.ndarray, store: EmbeddingStore, k: int) -> RetrievalResult:
    """Top-``k`` most similar store entries for ``query``.

    Returns fewer than ``k`` neighbours only when the store is smaller
    than ``k``. Deterministic for a fixed store: ties broken by ascending
    sample_id.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(store) == 0:
        raise ValueError("cannot retrieve from an empty store")
    scores = score_all(query, store)
    # Stable sort on negated scores keeps ascending row order within ties.
    order = np.argsort(-scores, kind="stable")[:k]
    return RetrievalResult(
        tuple((store.ids[row], float(scores[row])) for row in order)
    )
