"""k-NN densities, density peaks and Non-Maximum Density Suppression (NMDS)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .knn import KnnGraph, _as_matrix, _topk_rows, build_knn

CONNECTIVITY_AFFINITY = "connectivity-affinity"
AFFINITY_ONLY = "affinity-only"
DENSITY_MODES = (CONNECTIVITY_AFFINITY, AFFINITY_ONLY)


@dataclass(frozen=True)
class DensityMap:
    densities: np.ndarray
    mode: str
    k: int


@dataclass(frozen=True)
class PeakSet:
    """Surviving peaks, densest first."""

    peak_ids: np.ndarray
    densities: np.ndarray
    k_s: int
    lambda_nmds: float

    def __len__(self) -> int:
        return len(self.peak_ids)


def connectivity(p_i, p_j) -> float:
    """Agreement ``2<p_i, p_j> - 1`` of two class-probability vectors."""
    p_i = np.asarray(p_i, dtype=np.float64)
    p_j = np.asarray(p_j, dtype=np.float64)
    if p_i.shape != p_j.shape:
        raise ValueError(f"dimension mismatch: {p_i.shape} vs {p_j.shape}")
    return float(2.0 * np.dot(p_i, p_j) - 1.0)


def compute_density(graph: KnnGraph, probs=None, mode: str = CONNECTIVITY_AFFINITY) -> DensityMap:
    """Mean over each sample's neighbors of ``e_ij * a_ij`` (or of ``a_ij`` alone)."""
    if mode not in DENSITY_MODES:
        raise ValueError(f"unknown density mode {mode!r}")
    a = graph.affinities
    if mode == AFFINITY_ONLY:
        return DensityMap(a.mean(axis=1), mode, graph.k)
    if probs is None:
        raise ValueError("connectivity-affinity density needs a probability matrix")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != graph.n:
        raise ValueError(f"probability rows ({probs.shape[0] if probs.ndim else 0}) do not cover the {graph.n} graph samples")
    e = 2.0 * np.einsum("ik,ijk->ij", probs, probs[graph.neighbors]) - 1.0
    return DensityMap((e * a).mean(axis=1), mode, graph.k)


def find_peaks(density: DensityMap, graph: KnnGraph, strict: bool = False, candidates=None) -> np.ndarray:
    """Samples whose density dominates every one of their k neighbors.

    ``candidates`` optionally restricts which samples may be peaks; the
    neighborhoods themselves are unrestricted.
    """
    d = density.densities
    if d.shape[0] != graph.n:
        raise ValueError("density map and graph are not aligned")
    neigh_max = d[graph.neighbors].max(axis=1)
    is_peak = d > neigh_max if strict else d >= neigh_max
    if candidates is not None:
        mask = np.zeros_like(is_peak)
        mask[np.asarray(candidates, dtype=np.int64)] = True
        is_peak &= mask
    return np.flatnonzero(is_peak)


def iouk(i: int, j: int, embeddings, k_s: int) -> float:
    """Intersection-over-union of the ``k_s``-NN sets of samples ``i`` and ``j``."""
    x = _as_matrix(embeddings)
    n = x.shape[0]
    if not 1 <= k_s < n:
        raise ValueError(f"k_s must satisfy 1 <= k_s < n (k_s={k_s}, n={n})")
    for idx in (i, j):
        if not 0 <= idx < n:
            raise IndexError(f"sample id {idx} out of range for n={n}")
    sims = x[[i, j]] @ x.T
    sims[0, i] = sims[1, j] = -np.inf
    ids, _ = _topk_rows(sims, k_s)
    a, b = set(ids[0].tolist()), set(ids[1].tolist())
    return len(a & b) / len(a | b)


def pairwise_iouk(ids: Sequence[int], graph: KnnGraph) -> sparse.coo_matrix:
    """Sparse IoUK among ``ids`` using the neighborhoods of ``graph``; zero overlaps omitted."""
    ids = np.asarray(ids, dtype=np.int64)
    m, k_s = ids.size, graph.k
    rows = np.repeat(np.arange(m), k_s)
    member = sparse.csr_matrix(
        (np.ones(m * k_s, dtype=np.float64), (rows, graph.neighbors[ids].ravel())),
        shape=(m, graph.n),
    )
    inter = (member @ member.T).tocoo()
    # every neighbor set has exactly k_s members
    iou = inter.data / (2.0 * k_s - inter.data)
    return sparse.coo_matrix((iou, (inter.row, inter.col)), shape=(m, m))


def _suppressed(dens: np.ndarray, ids: np.ndarray, iou: sparse.coo_matrix, lambda_nmds: float, printed: bool) -> np.ndarray:
    r, c, v = iou.row, iou.col, iou.data
    hit = (v > lambda_nmds) & (r != c)
    r, c = r[hit], c[hit]
    if printed:
        # literal reading: discard the denser member of an overlapping pair
        beats = dens[r] > dens[c]
    else:
        beats = (dens[c] > dens[r]) | ((dens[c] == dens[r]) & (ids[c] < ids[r]))
    out = np.zeros(ids.size, dtype=bool)
    out[r[beats]] = True
    return out


def order_by_density(ids, dens) -> tuple[np.ndarray, np.ndarray]:
    """Sort by density descending, lower sample id first on ties."""
    ids = np.asarray(ids, dtype=np.int64)
    dens = np.asarray(dens, dtype=np.float64)
    order = np.lexsort((ids, -dens))
    return ids[order], dens[order]


def nmds(
    candidates: Iterable[tuple[int, float]],
    embeddings=None,
    k_s: int = 30,
    lambda_nmds: float = 0.6,
    *,
    graph: KnnGraph | None = None,
    printed: bool = False,
) -> PeakSet:
    """Non-Maximum Density Suppression over ``(sample id, density)`` pairs.

    A candidate is dropped when some other candidate overlaps it with
    IoUK > ``lambda_nmds`` and has higher density (or equal density and a
    lower sample id). Every candidate competes, including ones that are
    themselves dropped. ``printed=True`` flips the comparison to discard the
    denser member instead.

    Pass ``graph`` (any k-NN graph with ``k >= k_s``) to reuse precomputed
    neighborhoods; otherwise they are built from ``embeddings``.
    """
    if not 0 < lambda_nmds < 1:
        raise ValueError("lambda_nmds must lie in (0, 1)")
    pairs = list(candidates)
    if not pairs:
        return PeakSet(np.empty(0, dtype=np.int64), np.empty(0), k_s, lambda_nmds)
    ids = np.array([int(p[0]) for p in pairs], dtype=np.int64)
    dens = np.array([float(p[1]) for p in pairs], dtype=np.float64)
    if np.unique(ids).size != ids.size:
        raise ValueError("nmds candidates must be distinct")
    if graph is None:
        if embeddings is None:
            raise ValueError("nmds needs embeddings or a precomputed graph")
        graph = build_knn(embeddings, k_s)
    graph = graph.truncate(k_s)
    drop = _suppressed(dens, ids, pairwise_iouk(ids, graph), lambda_nmds, printed)
    kept_ids, kept_dens = order_by_density(ids[~drop], dens[~drop])
    return PeakSet(kept_ids, kept_dens, k_s, lambda_nmds)
