"""Embedding vectors, similarity metrics, and the binary store format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Mapping

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"MGEM"
FORMAT_VERSION = 1


class SimilarityMetric(str, Enum):
    COSINE = "cosine"
    MANHATTAN = "manhattan"
    EUCLIDEAN = "euclidean"


def _as_vector(values, name: str) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ContractError(f"{name} must be a 1-d vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ContractError(f"{name} contains non-finite entries")
    return vec


def similarity(a, b, metric: SimilarityMetric = SimilarityMetric.COSINE) -> float:
    """Similarity score between two vectors; higher always means more similar.

    Manhattan and Euclidean distances are negated so that top-K selection by
    highest score behaves identically across metrics.
    """
    va = _as_vector(a, "a")
    vb = _as_vector(b, "b")
    if va.shape != vb.shape:
        raise ContractError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    if metric == SimilarityMetric.COSINE:
        na = float(np.linalg.norm(va))
        nb = float(np.linalg.norm(vb))
        if na == 0.0 or nb == 0.0:
            raise ContractError("cosine similarity is undefined for zero vectors")
        return float(np.dot(va, vb) / (na * nb))
    if metric == SimilarityMetric.MANHATTAN:
        return float(-np.sum(np.abs(va - vb)))
    return float(-np.linalg.norm(va - vb))


def similarity_many(matrix: np.ndarray, query: np.ndarray, metric: SimilarityMetric) -> np.ndarray:
    """Vectorized `similarity` of one query against every row of `matrix`."""
    if matrix.ndim != 2 or matrix.shape[1] != query.shape[0]:
        raise ContractError(
            f"dimension mismatch: matrix {matrix.shape} vs query {query.shape[0]}"
        )
    if metric == SimilarityMetric.COSINE:
        qnorm = float(np.linalg.norm(query))
        row_norms = np.linalg.norm(matrix, axis=1)
        if qnorm == 0.0 or np.any(row_norms == 0.0):
            raise ContractError("cosine similarity is undefined for zero vectors")
        return (matrix @ query) / (row_norms * qnorm)
    if metric == SimilarityMetric.MANHATTAN:
        return -np.sum(np.abs(matrix - query), axis=1)
    return -np.linalg.norm(matrix - query, axis=1)


@dataclass
class EmbeddingStore:
    """Keyed fixed-dimension vectors; immutable once loaded."""

    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim <= 0:
            raise ContractError(f"store dimension must be positive, got {self.dim}")
        for key, vec in self.entries.items():
            self.entries[key] = self._check(key, vec)

    def _check(self, key: str, vec) -> np.ndarray:
        v = _as_vector(vec, f"vector for {key!r}")
        if v.shape[0] != self.dim:
            raise ContractError(
                f"vector for {key!r} has dim {v.shape[0]}, store declares {self.dim}"
            )
        return v

    def add(self, key: str, vec) -> None:
        if key in self.entries:
            raise ContractError(f"duplicate embedding key {key!r}")
        self.entries[key] = self._check(key, vec)

    def vector(self, key: str) -> np.ndarray:
        try:
            return self.entries[key]
        except KeyError:
            raise ContractError(f"embedding store has no entry for key {key!r}") from None

    def missing(self, keys: Iterable[str]) -> list[str]:
        return [k for k in keys if k not in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: str) -> bool:
        return key in self.entries


def write_embedding_store(store: EmbeddingStore, sink: IO[bytes]) -> None:
    """Write the bit-exact binary format; vectors are stored as f32 LE."""
    sink.write(MAGIC)
    sink.write(struct.pack("<H", FORMAT_VERSION))
    sink.write(struct.pack("<I", store.dim))
    sink.write(struct.pack("<Q", len(store.entries)))
    for key, vec in store.entries.items():
        encoded = key.encode("utf-8")
        sink.write(struct.pack("<I", len(encoded)))
        sink.write(encoded)
        sink.write(vec.astype("<f4").tobytes())


def _read_exact(source: IO[bytes], n: int, offset: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise FormatError(f"truncated embedding store while reading {what}", offset=offset)
    return data


def read_embedding_store(source: IO[bytes]) -> EmbeddingStore:
    """Read the binary store format back; values round-trip f32 bit-exactly."""
    offset = 0
    magic = source.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    offset += len(MAGIC)

    version = struct.unpack("<H", _read_exact(source, 2, offset, "version"))[0]
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=offset)
    offset += 2

    dim = struct.unpack("<I", _read_exact(source, 4, offset, "dimension"))[0]
    offset += 4
    count = struct.unpack("<Q", _read_exact(source, 8, offset, "entry count"))[0]
    offset += 8
    if dim == 0:
        raise FormatError("store declares dimension 0", offset=6)

    entries: dict[str, np.ndarray] = {}
    vec_bytes = 4 * dim
    for i in range(count):
        key_len = struct.unpack("<I", _read_exact(source, 4, offset, f"key length of entry {i}"))[0]
        offset += 4
        key = _read_exact(source, key_len, offset, f"key of entry {i}").decode("utf-8")
        offset += key_len
        raw = _read_exact(source, vec_bytes, offset, f"vector of entry {i} ({key!r})")
        offset += vec_bytes
        vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if key in entries:
            raise FormatError(f"duplicate key {key!r} in store", offset=offset)
        entries[key] = vec
    trailing = source.read(1)
    if trailing:
        raise FormatError("trailing bytes after declared entries", offset=offset)
    return EmbeddingStore(dim=dim, entries=entries)


def store_from_vectors(dim: int, vectors: Mapping[str, np.ndarray]) -> EmbeddingStore:
    store = EmbeddingStore(dim=dim)
    for key, vec in vectors.items():
        store.add(key, vec)
    return store
