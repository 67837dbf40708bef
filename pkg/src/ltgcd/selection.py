"""Reliable-sample selection: confidence, density peaks, and the prior they imply."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .density import (
    CONNECTIVITY_AFFINITY,
    DENSITY_MODES,
    compute_density,
    find_peaks,
    nmds,
)
from .knn import KnnGraph, _as_matrix, build_knn
from .store import LabelInfo

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelectionConfig:
    eps_conf: float = 0.8
    k: int = 10
    k_s: int = 30
    lambda_nmds: float = 0.6
    use_conf: bool = True
    use_dens: bool = True
    use_nmds: bool = True
    density_mode: str = CONNECTIVITY_AFFINITY
    normalize_prior: bool = True
    # CReST-style class-dependent confidence thresholds; None keeps one threshold
    crest_power: float | None = None

    def __post_init__(self):
        if not 0 < self.eps_conf <= 1:
            raise ValueError("eps_conf must lie in (0, 1]")
        if self.k < 1 or self.k_s < 1:
            raise ValueError("k and k_s must be positive")
        if not 0 < self.lambda_nmds < 1:
            raise ValueError("lambda_nmds must lie in (0, 1)")
        if self.density_mode not in DENSITY_MODES:
            raise ValueError(f"unknown density mode {self.density_mode!r}")
        if self.crest_power is not None and self.crest_power < 0:
            raise ValueError("crest_power must be >= 0")


@dataclass
class SelectionResult:
    conf_ids: np.ndarray
    dens_ids: np.ndarray
    union_ids: np.ndarray
    prior: np.ndarray
    epoch: int
    fallback: bool = False
    raw_peak_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "conf_ids": self.conf_ids.tolist(),
            "dens_ids": self.dens_ids.tolist(),
            "union_ids": self.union_ids.tolist(),
            "prior": self.prior.tolist(),
            "fallback": self.fallback,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SelectionResult":
        arr = lambda key: np.asarray(obj[key], dtype=np.int64)  # noqa: E731
        return cls(arr("conf_ids"), arr("dens_ids"), arr("union_ids"),
                   np.asarray(obj["prior"], dtype=np.float64), int(obj["epoch"]), bool(obj["fallback"]))


def _ids_or_range(ids, n: int) -> np.ndarray:
    return np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)


def select_confident(probs, epsilon_conf: float = 0.8, ids=None, thresholds=None) -> np.ndarray:
    """Samples whose top class probability reaches the threshold.

    ``probs`` rows align with ``ids`` (defaults to ``0..m-1``). With
    ``thresholds`` (one per class) the threshold of the predicted class is used.
    """
    probs = np.asarray(probs, dtype=np.float64)
    ids = _ids_or_range(ids, probs.shape[0])
    if probs.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    top = probs.max(axis=1)
    if thresholds is None:
        if not 0 < epsilon_conf <= 1:
            raise ValueError("epsilon_conf must lie in (0, 1]")
        keep = top >= epsilon_conf
    else:
        keep = top >= np.asarray(thresholds, dtype=np.float64)[probs.argmax(axis=1)]
    return np.sort(ids[keep])


def crest_thresholds(base_eps: float, pseudo_counts, power: float = 1.0) -> np.ndarray:
    """Per-class thresholds ``base * (count_k / max count) ** power``."""
    counts = np.asarray(pseudo_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("pseudo-label counts must be non-negative")
    if counts.size == 0 or counts.max() == 0:
        raise ValueError("crest thresholds need at least one non-zero count")
    if power < 0:
        raise ValueError("power must be >= 0")
    return base_eps * (counts / counts.max()) ** power


def select_density(
    embeddings,
    probs,
    k: int = 10,
    k_s: int = 30,
    lambda_nmds: float = 0.6,
    *,
    candidates=None,
    graph: KnnGraph | None = None,
    use_nmds: bool = True,
    mode: str = CONNECTIVITY_AFFINITY,
    return_raw: bool = False,
):
    """NMDS-filtered density peaks among ``candidates`` (default: all samples).

    Densities and neighborhoods use every sample; only peak membership is
    restricted to ``candidates``.
    """
    x = _as_matrix(embeddings)
    if candidates is not None and len(candidates) == 0:
        empty = np.empty(0, dtype=np.int64)
        return (empty, empty) if return_raw else empty
    need = max(k, k_s) if use_nmds else k
    if graph is None or graph.k < need:
        graph = build_knn(x, need)
    dens = compute_density(graph.truncate(k), probs, mode)
    raw = find_peaks(dens, graph.truncate(k), candidates=candidates)
    if use_nmds:
        kept = nmds(zip(raw, dens.densities[raw]), k_s=k_s, lambda_nmds=lambda_nmds, graph=graph).peak_ids
    else:
        kept = raw
    kept = np.sort(kept)
    return (kept, raw) if return_raw else kept


def combine(conf_ids, dens_ids) -> np.ndarray:
    return np.union1d(np.asarray(conf_ids, dtype=np.int64), np.asarray(dens_ids, dtype=np.int64))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def prior_distribution(probs, selected_ids, k_classes: int | None = None, normalize_counts: bool = True) -> np.ndarray:
    """Softmax of the one-hot pseudo-label histogram of the selected samples.

    ``probs`` is indexed by sample id. By default the histogram is divided by
    the selection size first; ``normalize_counts=False`` feeds raw counts.
    """
    probs = np.asarray(probs, dtype=np.float64)
    selected_ids = np.asarray(selected_ids, dtype=np.int64)
    if selected_ids.size == 0:
        raise ValueError("prior of an empty selection")
    k_classes = probs.shape[1] if k_classes is None else k_classes
    counts = np.bincount(probs[selected_ids].argmax(axis=1), minlength=k_classes).astype(np.float64)
    if normalize_counts:
        counts /= selected_ids.size
    return _softmax(counts)


def resample_epoch(
    embeddings,
    label_info: LabelInfo,
    probs,
    config: SelectionConfig = SelectionConfig(),
    epoch: int = 0,
    *,
    graph: KnnGraph | None = None,
) -> SelectionResult:
    """One end-of-epoch selection over the unlabelled pool.

    ``probs`` covers every sample (teacher-temperature predictions). An empty
    union falls back to the whole unlabelled set with ``fallback=True``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    unl = label_info.unlabelled_ids
    empty = np.empty(0, dtype=np.int64)

    conf = empty
    if config.use_conf and unl.size:
        thresholds = None
        if config.crest_power is not None:
            pseudo = np.bincount(probs[unl].argmax(axis=1), minlength=probs.shape[1])
            thresholds = crest_thresholds(config.eps_conf, pseudo, config.crest_power)
        conf = select_confident(probs[unl], config.eps_conf, ids=unl, thresholds=thresholds)

    dens, raw = empty, empty
    if config.use_dens and unl.size:
        dens, raw = select_density(
            embeddings, probs, config.k, config.k_s, config.lambda_nmds,
            candidates=unl, graph=graph, use_nmds=config.use_nmds,
            mode=config.density_mode, return_raw=True,
        )

    union = combine(conf, dens)
    fallback = union.size == 0 and unl.size > 0
    if fallback:
        log.warning("epoch %d: empty selection, falling back to the full unlabelled set", epoch)
        union = np.sort(unl)
    if union.size:
        prior = prior_distribution(probs, union, probs.shape[1], config.normalize_prior)
    else:
        # nothing unlabelled to select from: the prior carries no information
        prior = np.full(probs.shape[1], 1.0 / probs.shape[1])
    return SelectionResult(conf, dens, union, prior, epoch, fallback, np.sort(raw))
