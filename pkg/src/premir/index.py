"""
Exact cosine top-k search over unit-normalised preQ embeddings.

On disk an index is a directory holding ``vectors.bin`` (one ASCII header
line followed by little-endian float32 rows) and ``ids.txt`` (one id per
line, same order).
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatchError, VectorIndexError

VECTORS_FILE = "vectors.bin"
IDS_FILE = "ids.txt"
_MAGIC = "PREMIRVEC 1"
_HEADER = re.compile(rb"^PREMIRVEC 1 dimension=(\d+) count=(\d+)\n")
SCAN_BLOCK = 8192


@dataclass(frozen=True)
class ScoredHit:
    preq_id: str
    score: float
    rank: int


def _normalize(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise VectorIndexError("cannot normalise a zero vector")
    return vectors / norms


class VectorIndex:
    """Immutable exact-search index; safe for concurrent ``top_k`` calls."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, dimension: Optional[int] = None):
        ids = list(ids)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.size == 0:
            vectors = vectors.reshape(0, dimension or (vectors.shape[-1] if vectors.ndim == 2 else 0))
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise VectorIndexError(f"{len(ids)} ids but vectors of shape {vectors.shape}")
        if len(set(ids)) != len(ids):
            raise VectorIndexError("duplicate ids in index")
        self.ids = ids
        self.vectors = vectors
        self.vectors.setflags(write=False)
        self.dimension = int(vectors.shape[1]) if dimension is None else int(dimension)
        if len(ids) and vectors.shape[1] != self.dimension:
            raise DimensionMismatchError(f"vectors have dimension {vectors.shape[1]}, expected {self.dimension}")
        self.id_lookup: Dict[str, int] = {pid: i for i, pid in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        return (isinstance(other, VectorIndex) and self.ids == other.ids
                and self.dimension == other.dimension
                and np.array_equal(self.vectors, other.vectors))

    def subset(self, ids: Sequence[str]) -> "VectorIndex":
        """Index over ``ids`` only, keeping this index's canonical order."""
        wanted = set(ids)
        rows = [i for i, pid in enumerate(self.ids) if pid in wanted]
        if len(rows) != len(wanted):
            missing = sorted(wanted - set(self.ids))[:3]
            raise VectorIndexError(f"ids not in index: {missing}")
        return VectorIndex([self.ids[i] for i in rows], self.vectors[rows], self.dimension)

    def scores(self, query_vector: np.ndarray) -> np.ndarray:
        """Cosine similarity of the query against every entry (float64).

        Each row's dot product is reduced the same way regardless of its
        position, so identical vectors always receive identical scores.
        """
        q = np.asarray(query_vector, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dimension:
            raise DimensionMismatchError(f"query dimension {q.shape[0]} != index dimension {self.dimension}")
        q = _normalize(q)
        out = np.empty(len(self.ids), dtype=np.float64)
        for start in range(0, len(self.ids), SCAN_BLOCK):
            block = self.vectors[start:start + SCAN_BLOCK].astype(np.float64)
            out[start:start + SCAN_BLOCK] = (block * q).sum(axis=1)
        return out

    def top_k(self, query_vector: np.ndarray, k: int) -> List[ScoredHit]:
        return top_k(self, query_vector, k)


def build_index(pool) -> VectorIndex:
    """Index every embedded preQ of ``pool`` in pool order."""
    ids, rows = [], []
    dim = None
    for q in pool.preqs:
        if q.embedding is None:
            raise VectorIndexError(f"preQ {q.id} has no embedding")
        v = np.asarray(q.embedding).reshape(-1)
        if dim is None:
            dim = v.shape[0]
        elif v.shape[0] != dim:
            raise DimensionMismatchError(f"preQ {q.id} has dimension {v.shape[0]}, expected {dim}")
        ids.append(q.id)
        rows.append(v)
    if not rows:
        return VectorIndex([], np.zeros((0, 0), np.float32), 0)
    return VectorIndex(ids, _normalize(np.stack(rows)))


def top_k(index: VectorIndex, query_vector: np.ndarray, k: int) -> List[ScoredHit]:
    """Exact top-k by cosine; equal scores keep canonical entry order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    scores = index.scores(query_vector)
    n = len(scores)
    k = min(k, n)
    if k < n:
        kth = np.partition(-scores, k - 1)[k - 1]
        candidates = np.flatnonzero(-scores <= kth)
    else:
        candidates = np.arange(n)
    order = candidates[np.lexsort((candidates, -scores[candidates]))][:k]
    # float32 storage can push |score| a hair past 1; clipping keeps the order
    clipped = np.clip(scores[order], -1.0, 1.0)
    return [ScoredHit(index.ids[i], float(s), r)
            for r, (i, s) in enumerate(zip(order, clipped), start=1)]


# ---------------------------------------------------------------------------
# persistence


def write_vectors(directory, ids: Sequence[str], vectors: np.ndarray) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    count = len(ids)
    dim = vectors.shape[1] if vectors.ndim == 2 else 0
    if vectors.shape[0] != count:
        raise VectorIndexError("ids/vectors length mismatch")
    for pid in ids:
        if "\n" in pid:
            raise VectorIndexError(f"id contains a newline: {pid!r}")
    tmp = directory / (VECTORS_FILE + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(f"{_MAGIC} dimension={dim} count={count}\n".encode("ascii"))
        fh.write(vectors.tobytes())
    os.replace(tmp, directory / VECTORS_FILE)
    (directory / IDS_FILE).write_text("".join(pid + "\n" for pid in ids), encoding="utf-8")
    return directory


def read_vectors(directory) -> Tuple[List[str], np.ndarray]:
    directory = Path(directory)
    vpath, ipath = directory / VECTORS_FILE, directory / IDS_FILE
    if not vpath.is_file() or not ipath.is_file():
        raise VectorIndexError(f"index files missing in {directory}")
    data = vpath.read_bytes()
    m = _HEADER.match(data)
    if m is None:
        raise VectorIndexError(f"{vpath}: corrupt header")
    dim, count = int(m.group(1)), int(m.group(2))
    body = data[m.end():]
    if len(body) != dim * count * 4:
        raise VectorIndexError(
            f"{vpath}: expected {dim * count * 4} bytes of vectors, found {len(body)}")
    ids = ipath.read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise VectorIndexError(f"{ipath}: {len(ids)} ids but header says {count}")
    vectors = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float32)
    return ids, vectors


def persist(index: VectorIndex, path) -> Path:
    return write_vectors(path, index.ids, index.vectors.reshape(len(index), index.dimension))


def load(path) -> VectorIndex:
    ids, vectors = read_vectors(path)
    return VectorIndex(ids, vectors, vectors.shape[1])
