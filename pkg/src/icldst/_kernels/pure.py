"""Pure-numpy fallback for the retrieval scan kernel."""

import numpy as np

# Rows per matmul chunk. Bounds the float64 temporary to a few MB.
_CHUNK_ROWS = 8192


def dot_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Dot product of every row of ``matrix`` against ``query``.

    Accumulates in float64 and rounds the result to float32, matching the
    compiled kernel bit for bit.
    """
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    query = np.ascontiguousarray(query, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError(f"matrix must be 2-dimensional, got shape {matrix.shape}")
    if query.ndim != 1:
        raise ValueError(f"query must be 1-dimensional, got shape {query.shape}")
    if matrix.shape[1] != query.shape[0]:
        raise ValueError(
            f"dimension mismatch: matrix has {matrix.shape[1]}, query has {query.shape[0]}"
        )
    query64 = query.astype(np.float64)
    scores = np.empty(matrix.shape[0], dtype=np.float32)
    for start in range(0, matrix.shape[0], _CHUNK_ROWS):
        chunk = matrix[start : start + _CHUNK_ROWS]
        scores[start : start + _CHUNK_ROWS] = (chunk.astype(np.float64) @ query64).astype(
            np.float32
        )
    return scores
