"""Exact k-nearest-neighbor graphs by inner product."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .store import EmbeddingSet


@dataclass(frozen=True)
class KnnGraph:
    """Per-sample neighbor ids (nearest first, self excluded) and affinities."""

    neighbors: np.ndarray
    affinities: np.ndarray

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    def truncate(self, k: int) -> "KnnGraph":
        """The ``k``-NN graph contained in this one (valid because lists are sorted)."""
        if not 1 <= k <= self.k:
            raise ValueError(f"cannot truncate a {self.k}-NN graph to k={k}")
        return KnnGraph(self.neighbors[:, :k], self.affinities[:, :k])


def _as_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, EmbeddingSet):
        return embeddings.data
    return np.asarray(embeddings, dtype=np.float64)


def _topk_rows(sims: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k column ids per row, ties at equal similarity going to the lower id."""
    b, n = sims.shape
    kth = -np.partition(-sims, k - 1, axis=1)[:, k - 1 : k]
    keep = sims > kth
    ties = sims == kth
    short = k - keep.sum(axis=1)
    # rows with more tied entries than open slots need the lowest-id subset
    crowded = ties.sum(axis=1) > short
    if np.any(crowded):
        rows = np.flatnonzero(crowded)
        rank = np.cumsum(ties[rows], axis=1)
        ties[rows] &= rank <= short[rows, None]
    keep |= ties
    _, cols = np.nonzero(keep)
    cols = cols.reshape(b, k)
    vals = np.take_along_axis(sims, cols, axis=1)
    # cols are ascending per row, so a stable sort on -vals keeps the id tie rule
    order = np.argsort(-vals, axis=1, kind="stable")
    return np.take_along_axis(cols, order, axis=1), np.take_along_axis(vals, order, axis=1)


def build_knn(embeddings, k: int, block_size: int = 1024) -> KnnGraph:
    """Exact top-``k`` neighbors by inner product using blocked matrix products."""
    x = _as_matrix(embeddings)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    neighbors = np.empty((n, k), dtype=np.int64)
    affinities = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        sims = x[start:stop] @ x.T
        sims[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        neighbors[start:stop], affinities[start:stop] = _topk_rows(sims, k)
    neighbors.setflags(write=False)
    affinities.setflags(write=False)
    return KnnGraph(neighbors, affinities)


def affinity(i: int, j: int, embeddings) -> float:
    """Inner product of samples ``i`` and ``j``."""
    x = _as_matrix(embeddings)
    n = x.shape[0]
    for idx in (i, j):
        if not 0 <= idx < n:
            raise IndexError(f"sample id {idx} out of range for n={n}")
    return float(np.dot(x[i], x[j]))


_RECORD = np.dtype([("id", "<u4"), ("affinity", "<f4")])


def save_graph(path, graph: KnnGraph) -> None:
    """Cache format: ``u32 n, u32 k`` then ``n*k`` (u32 id, f32 affinity) records."""
    rec = np.empty(graph.neighbors.size, dtype=_RECORD)
    rec["id"] = graph.neighbors.ravel()
    rec["affinity"] = graph.affinities.ravel()
    with open(path, "wb") as fh:
        fh.write(np.array([graph.n, graph.k], dtype="<u4").tobytes())
        fh.write(rec.tobytes())


def load_graph(path) -> KnnGraph:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated graph header")
    n, k = (int(v) for v in np.frombuffer(raw[:8], dtype="<u4"))
    if len(raw) != 8 + n * k * _RECORD.itemsize:
        raise ValueError(f"{path}: size does not match header n={n}, k={k}")
    rec = np.frombuffer(raw[8:], dtype=_RECORD)
    return KnnGraph(
        rec["id"].astype(np.int64).reshape(n, k),
        rec["affinity"].astype(np.float64).reshape(n, k),
    )
