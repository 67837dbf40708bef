"""Estimating the number of classes from density peaks on the mixed set."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .density import AFFINITY_ONLY, CONNECTIVITY_AFFINITY, DENSITY_MODES, PeakSet, compute_density, find_peaks, nmds
from .evaluation import clustering_acc
from .knn import KnnGraph, _as_matrix, build_knn
from .store import LabelInfo

_GOLDEN = 0.5 * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class EstimationConfig:
    k: int = 10
    k_s: int = 30
    lambda_nmds: float = 0.08
    brent_tol: float = 1.0
    exhaustive_cutoff: int = 50
    # None picks connectivity-affinity when probabilities are supplied
    density_mode: str | None = None

    def __post_init__(self):
        if self.k < 1 or self.k_s < 1:
            raise ValueError("k and k_s must be positive")
        if not 0 < self.lambda_nmds < 1:
            raise ValueError("lambda_nmds must lie in (0, 1)")
        if self.brent_tol <= 0:
            raise ValueError("brent_tol must be positive")
        if self.exhaustive_cutoff < 1:
            raise ValueError("exhaustive_cutoff must be >= 1")
        if self.density_mode is not None and self.density_mode not in DENSITY_MODES:
            raise ValueError(f"unknown density mode {self.density_mode!r}")


@dataclass
class EstimationReport:
    k_hat: int
    lower: int
    upper: int
    probe_history: list[tuple[int, float]]
    assignments: np.ndarray
    peak_ids: np.ndarray
    search: str
    timing: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["probe_history"] = [[k, acc] for k, acc in self.probe_history]
        out["assignments"] = self.assignments.tolist()
        out["peak_ids"] = self.peak_ids.tolist()
        return out


def class_bounds(peaks, k_labelled: int) -> tuple[int, int]:
    """``(max(k_labelled, 1), max(#peaks, k_labelled))``."""
    lower = max(int(k_labelled), 1)
    return lower, max(len(peaks), lower)


def assign_to_peaks(embeddings, peaks_by_density, K: int) -> np.ndarray:
    """Index (into the top-``K`` peaks) of each sample's most similar peak."""
    if K < 1:
        raise ValueError("K must be >= 1")
    peaks = np.asarray(peaks_by_density, dtype=np.int64)
    if K > peaks.size:
        raise ValueError(f"K={K} exceeds the {peaks.size} available peaks")
    x = _as_matrix(embeddings)
    # argmax returns the first maximum, i.e. the lower prototype index on ties
    return np.argmax(x @ x[peaks[:K]].T, axis=1)


def labelled_objective(assignments, label_info: LabelInfo) -> float:
    """Clustering accuracy of ``assignments`` on the labelled samples only."""
    lab = label_info.labelled_ids
    if lab.size == 0:
        raise ValueError("no labelled samples to score against")
    acc, _ = clustering_acc(np.asarray(assignments)[lab], label_info.labels[lab])
    return acc


class _Memo:
    """Integer-lattice objective cache; records probes in call order."""

    def __init__(self, f: Callable[[int], float], lower: int, upper: int):
        self.f, self.lower, self.upper = f, lower, upper
        self.values: dict[int, float] = {}

    def __call__(self, x: float) -> float:
        k = min(max(int(math.floor(x + 0.5)), self.lower), self.upper)
        if k not in self.values:
            self.values[k] = float(self.f(k))
        return self.values[k]

    def best(self) -> int:
        # highest value, larger K on ties
        return max(self.values, key=lambda k: (self.values[k], k))


def brent_minimize(f: Callable[[float], float], a: float, b: float, xtol: float = 1e-5, maxiter: int = 500) -> float:
    """Bounded Brent minimization: golden-section steps plus parabolic interpolation."""
    if not a < b:
        raise ValueError("need a < b")
    x = w = v = a + _GOLDEN * (b - a)
    fx = fw = fv = f(x)
    d = e = 0.0
    for _ in range(maxiter):
        m = 0.5 * (a + b)
        tol1 = xtol / 3.0 + 1e-10 * abs(x)
        tol2 = 2.0 * tol1
        if abs(x - m) <= tol2 - 0.5 * (b - a):
            break
        parabolic = False
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0:
                p = -p
            q = abs(q)
            if abs(p) < abs(0.5 * q * e) and q * (a - x) < p < q * (b - x):
                e, d = d, p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = tol1 if m >= x else -tol1
                parabolic = True
        if not parabolic:
            e = (a if x >= m else b) - x
            d = _GOLDEN * e
        u = x + (d if abs(d) >= tol1 else math.copysign(tol1, d))
        fu = f(u)
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, fv, w, fw, x, fx = w, fw, x, fx, u, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, fv, w, fw = w, fw, u, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x


def search_max(f: Callable[[int], float], lower: int, upper: int, *, tol: float = 1.0,
               exhaustive_cutoff: int = 50) -> tuple[int, list[tuple[int, float]], str]:
    """Maximize an integer objective on ``[lower, upper]``.

    Short ranges are scanned exhaustively; longer ones use Brent on the
    rounded lattice with every integer evaluated at most once. Returns the
    best probed K (larger K on ties), the probe history and the strategy used.
    """
    if lower > upper:
        raise ValueError("lower must not exceed upper")
    memo = _Memo(f, lower, upper)
    if lower == upper:
        memo(lower)
        strategy = "degenerate"
    elif upper - lower < exhaustive_cutoff:
        for k in range(lower, upper + 1):
            memo(k)
        strategy = "exhaustive"
    else:
        brent_minimize(lambda x: -memo(x), lower - 0.5, upper + 0.5, xtol=tol)
        strategy = "brent"
    return memo.best(), list(memo.values.items()), strategy


def estimate_k(
    embeddings,
    label_info: LabelInfo,
    probs=None,
    config: EstimationConfig = EstimationConfig(),
    *,
    graph: KnnGraph | None = None,
) -> EstimationReport:
    """Class count maximizing labelled accuracy of nearest-peak clustering.

    Peaks are found on all samples with labels ignored; candidate K uses the
    K densest retained peaks as prototypes.
    """
    x = _as_matrix(embeddings)
    timing = {}
    t0 = time.perf_counter()
    need = max(config.k, config.k_s)
    if graph is None or graph.k < need:
        graph = build_knn(x, need)
    timing["knn"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    mode = config.density_mode or (AFFINITY_ONLY if probs is None else CONNECTIVITY_AFFINITY)
    dens = compute_density(graph.truncate(config.k), probs, mode)
    raw = find_peaks(dens, graph.truncate(config.k))
    peaks: PeakSet = nmds(zip(raw, dens.densities[raw]), k_s=config.k_s, lambda_nmds=config.lambda_nmds, graph=graph)
    timing["peaks"] = time.perf_counter() - t0

    lower, upper = class_bounds(peaks, label_info.k_labelled)
    # fewer peaks than labelled classes: the interval is degenerate and the
    # clustering uses every peak
    n_peaks = len(peaks)

    t0 = time.perf_counter()
    objective = lambda K: labelled_objective(assign_to_peaks(x, peaks.peak_ids, min(K, n_peaks)), label_info)  # noqa: E731
    k_hat, history, strategy = search_max(objective, lower, upper, tol=config.brent_tol,
                                          exhaustive_cutoff=config.exhaustive_cutoff)
    assignments = assign_to_peaks(x, peaks.peak_ids, min(k_hat, n_peaks))
    timing["probes"] = time.perf_counter() - t0
    return EstimationReport(k_hat, lower, upper, history, assignments, peaks.peak_ids, strategy, timing)
