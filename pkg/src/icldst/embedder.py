"""Sentence-embedding backends and the precomputed embedding store.

Backends share one contract: a batch of texts in, one unit-normalized
float32 vector per text out, order preserved. The mock backend is a
deterministic bag-of-tokens hasher used as the offline test oracle; the
service backend talks to an HTTP embeddings endpoint.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._retry import RequestFailed, post_json

logger = logging.getLogger(__name__)

STORE_FORMAT = "emb-jsonl/1"

# 64-bit FNV-1a constants
_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


class StoreFormatError(Exception):
    """Malformed embedding store file."""


class EmbeddingConfigError(Exception):
    """Fatal configuration problem, e.g. a dimension mismatch."""


class EmbeddingServiceError(Exception):
    """Embedding service unreachable after retries (retryable condition)."""


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def token_bucket(token: str, dimension: int) -> int:
    return fnv1a_64(token.encode("utf-8")) % dimension


def mock_embed(text: str, dimension: int) -> np.ndarray:
    """Deterministic bag-of-tokens embedding.

    Lowercases, splits on whitespace, hashes each token into one of
    `dimension` buckets with 64-bit FNV-1a, and L2-normalizes the bucket
    counts. Texts sharing more tokens land closer in cosine space. Empty
    text hashes the empty token so the result is still a unit vector.
    """
    if dimension < 8:
        raise ValueError(f"mock embedding dimension must be >= 8, got {dimension}")
    counts = np.zeros(dimension, dtype=np.float64)
    for token in text.lower().split() or [""]:
        counts[token_bucket(token, dimension)] += 1.0
    return (counts / np.linalg.norm(counts)).astype(np.float32)


class MockEmbedder:
    """Offline embedding backend built on mock_embed."""

    kind = "mock"

    def __init__(self, dimension: int = 256):
        if dimension < 8:
            raise ValueError(f"mock embedding dimension must be >= 8, got {dimension}")
        self.dimension = dimension
        self.model_name = f"mock-fnv1a-{dimension}"

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dimension), dtype=np.float32)
        for i, text in enumerate(texts):
            out[i] = mock_embed(text, self.dimension)
        return out


class HttpEmbeddingService:
    """Client for an embeddings endpoint: POST {"model", "input": [...]}
    returning {"data": [{"index", "embedding"}]}. Responses are re-ordered
    by index and unit-normalized."""

    kind = "service"

    def __init__(
        self,
        url: str,
        model_name: str,
        dimension: int | None = None,
        timeout: float = 30.0,
        max_retries: int = 3,
        parallelism: int = 4,
        batch_size: int = 64,
        api_key_env: str | None = None,
    ):
        self.url = url
        self.model_name = model_name
        self.dimension = dimension  # learned from the first response if None
        self.timeout = timeout
        self.max_retries = max_retries
        self.parallelism = max(1, parallelism)
        self.batch_size = max(1, batch_size)
        self.api_key_env = api_key_env

    def _headers(self) -> dict | None:
        if self.api_key_env and os.environ.get(self.api_key_env):
            return {"Authorization": f"Bearer {os.environ[self.api_key_env]}"}
        return None

    def _embed_one_batch(self, texts: Sequence[str]) -> np.ndarray:
        try:
            resp = post_json(
                self.url,
                {"model": self.model_name, "input": list(texts)},
                timeout=self.timeout,
                max_retries=self.max_retries,
                headers=self._headers(),
            )
        except RequestFailed as exc:
            raise EmbeddingServiceError(str(exc)) from exc
        data = resp.get("data")
        if not isinstance(data, list) or len(data) != len(texts):
            raise EmbeddingServiceError(
                f"embedding service returned {len(data) if isinstance(data, list) else 'no'} "
                f"vectors for {len(texts)} texts"
            )
        vectors: list[np.ndarray | None] = [None] * len(texts)
        for item in data:
            vectors[int(item["index"])] = np.asarray(item["embedding"], dtype=np.float32)
        if any(v is None for v in vectors):
            raise EmbeddingServiceError("embedding service response missing indices")
        dims = {v.shape[0] for v in vectors}  # type: ignore[union-attr]
        if len(dims) != 1:
            raise EmbeddingServiceError(f"inconsistent vector dimensions {sorted(dims)}")
        dim = dims.pop()
        if self.dimension is None:
            self.dimension = dim
        elif dim != self.dimension:
            raise EmbeddingConfigError(
                f"embedding service returned dimension {dim}, expected {self.dimension}"
            )
        out = np.stack(vectors)  # type: ignore[arg-type]
        norms = np.linalg.norm(out.astype(np.float64), axis=1)
        if np.any(norms == 0.0) or not np.all(np.isfinite(out)):
            raise EmbeddingServiceError("embedding service returned a zero or non-finite vector")
        return (out / norms[:, None]).astype(np.float32)

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        batches = [texts[i:i + self.batch_size] for i in range(0, len(texts), self.batch_size)]
        if not batches:
            return np.empty((0, self.dimension or 0), dtype=np.float32)
        if len(batches) == 1 or self.parallelism == 1:
            parts = [self._embed_one_batch(b) for b in batches]
        else:
            # learn the dimension from a single batch before going parallel
            parts = [self._embed_one_batch(batches[0])]
            with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                parts.extend(pool.map(self._embed_one_batch, batches[1:]))
        return np.concatenate(parts)


def embed_texts(texts: Sequence[str], backend) -> np.ndarray:
    """One unit-normalized float32 vector per text, in input order."""
    if not texts:
        dim = getattr(backend, "dimension", None) or 0
        return np.empty((0, dim), dtype=np.float32)
    return backend.embed_batch(list(texts))


@dataclass
class EmbeddingStore:
    """Immutable id-keyed unit vectors; rows sorted by ascending sample_id
    so row order doubles as the retrieval tie-break order."""

    model_name: str
    dimension: int
    ids: tuple[str, ...]
    matrix: np.ndarray  # (len(ids), dimension) float32
    meta: dict = field(default_factory=dict)
    load_warnings: int = 0

    @classmethod
    def from_entries(
        cls,
        model_name: str,
        entries: Iterable[tuple[str, np.ndarray]],
        dimension: int | None = None,
        meta: dict | None = None,
    ) -> "EmbeddingStore":
        pairs = sorted(entries, key=lambda kv: kv[0])
        ids = tuple(sid for sid, _ in pairs)
        if len(set(ids)) != len(ids):
            dupes = sorted({s for s in ids if ids.count(s) > 1})
            raise StoreFormatError(f"duplicate sample_id(s): {dupes[:5]}")
        if pairs:
            matrix = np.stack([np.asarray(v, dtype=np.float32) for _, v in pairs])
            if dimension is None:
                dimension = int(matrix.shape[1])
            elif matrix.shape[1] != dimension:
                raise StoreFormatError(
                    f"vectors have dimension {matrix.shape[1]}, store declares {dimension}"
                )
        else:
            if dimension is None:
                raise StoreFormatError("empty store needs an explicit dimension")
            matrix = np.empty((0, dimension), dtype=np.float32)
        return cls(model_name, dimension, ids, matrix, dict(meta or {}))

    def __post_init__(self):
        self._row_of = {sid: i for i, sid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._row_of

    def row_of(self, sample_id: str) -> int:
        return self._row_of[sample_id]

    def get(self, sample_id: str) -> np.ndarray:
        return self.matrix[self._row_of[sample_id]]

    def missing(self, ids: Iterable[str]) -> list[str]:
        return [sid for sid in ids if sid not in self._row_of]

    def restrict_to(self, ids: Iterable[str]) -> "EmbeddingStore":
        """Sub-store holding only the given ids (all must be present)."""
        wanted = set(ids)
        absent = wanted - set(self.ids)
        if absent:
            raise StoreFormatError(
                f"store is missing {len(absent)} ids, e.g. {sorted(absent)[:5]}"
            )
        keep = [i for i, sid in enumerate(self.ids) if sid in wanted]
        return EmbeddingStore(
            self.model_name,
            self.dimension,
            tuple(self.ids[i] for i in keep),
            self.matrix[keep],
            dict(self.meta),
            self.load_warnings,
        )


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    """Write the emb-jsonl format: one header line, one line per entry.

    Floats go through Python's repr, which round-trips 32-bit values.
    """
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "format": STORE_FORMAT,
            "model": store.model_name,
            "dim": store.dimension,
            "count": len(store),
        }
        header.update(store.meta)
        f.write(json.dumps(header, ensure_ascii=False) + "\n")
        for sid in store.ids:
            row = [float(x) for x in store.get(sid)]
            f.write(json.dumps({"id": sid, "v": row}, ensure_ascii=False) + "\n")


def load_store(path: str | Path) -> EmbeddingStore:
    """Load and validate an emb-jsonl store.

    Vectors whose norm drifts past 1e-5 are silently re-normalized;
    deviations beyond 1e-3 additionally raise a warning (counted in
    load_warnings) since they suggest the producer skipped normalization.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        first = f.readline()
        if not first.strip():
            raise StoreFormatError(f"{path}: missing header line")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise StoreFormatError(f"{path}: header is not valid JSON: {exc}") from exc
        if header.get("format") != STORE_FORMAT:
            raise StoreFormatError(
                f"{path}: unsupported format {header.get('format')!r}"
            )
        for key in ("model", "dim", "count"):
            if key not in header:
                raise StoreFormatError(f"{path}: header missing {key!r}")
        dim = int(header["dim"])
        if dim <= 0:
            raise StoreFormatError(f"{path}: non-positive dimension {dim}")

        ids: list[str] = []
        rows: list[np.ndarray] = []
        seen: set[str] = set()
        warnings = 0
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sid = str(obj["id"])
                vec = np.asarray(obj["v"], dtype=np.float32)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise StoreFormatError(f"{path}: line {lineno}: {exc}") from exc
            if vec.ndim != 1 or vec.shape[0] != dim:
                raise StoreFormatError(
                    f"{path}: line {lineno}: vector has {vec.shape[0] if vec.ndim == 1 else '?'} "
                    f"values, header declares dim {dim}"
                )
            if not np.all(np.isfinite(vec)):
                raise StoreFormatError(f"{path}: line {lineno}: non-finite value")
            if sid in seen:
                raise StoreFormatError(f"{path}: line {lineno}: duplicate id {sid!r}")
            seen.add(sid)
            norm = float(np.linalg.norm(vec.astype(np.float64)))
            if norm == 0.0:
                raise StoreFormatError(f"{path}: line {lineno}: zero vector")
            if abs(norm - 1.0) > 1e-3:
                logger.warning("%s: line %d: norm %.6f re-normalized", path, lineno, norm)
                warnings += 1
                vec = (vec / norm).astype(np.float32)
            elif abs(norm - 1.0) > 1e-5:
                vec = (vec / norm).astype(np.float32)
            ids.append(sid)
            rows.append(vec)

    if len(ids) != int(header["count"]):
        raise StoreFormatError(
            f"{path}: header declares count {header['count']}, found {len(ids)}"
        )
    meta = {k: v for k, v in header.items()
            if k not in ("format", "model", "dim", "count")}
    store = EmbeddingStore.from_entries(
        str(header["model"]), zip(ids, rows), dimension=dim, meta=meta
    )
    store.load_warnings = warnings
    return store
