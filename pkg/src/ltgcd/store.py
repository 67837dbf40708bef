"""Embedding datasets: loading, synthetic generation, labelled splits.

On-disk layout is a JSON manifest pointing at a raw little-endian float32
matrix and a newline-delimited label file (``-1`` marks unlabelled rows)::

    {"n": 4000, "d": 32, "dtype": "f32", "data": "emb.f32",
     "labels": "labels.txt", "true_labels": "truth.txt", "classes": 20}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

UNLABELLED = -1


class DatasetError(ValueError):
    """Raised for malformed or inconsistent embedding datasets."""


@dataclass(frozen=True)
class EmbeddingSet:
    """Row-normalized ``n x d`` feature matrix."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DatasetError(f"embeddings must be 2-D, got shape {data.shape}")
        n, d = data.shape
        if n < 1 or d < 2:
            raise DatasetError(f"need n >= 1 and d >= 2, got n={n}, d={d}")
        if not np.all(np.isfinite(data)):
            raise DatasetError("embeddings contain non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_raw(cls, raw) -> "EmbeddingSet":
        return cls(normalize_rows(raw))


@dataclass(frozen=True)
class LabelInfo:
    """Partial labels for a GCD split.

    ``labels`` holds the visible class id per sample or ``UNLABELLED``;
    ``true_labels`` is ground truth kept for evaluation only.
    """

    labels: np.ndarray
    true_labels: np.ndarray | None = None
    old_class_set: frozenset = field(default=None)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise DatasetError("labels must be 1-D")
        observed = frozenset(int(c) for c in np.unique(labels[labels != UNLABELLED]))
        if self.old_class_set is None:
            old = observed
        else:
            old = frozenset(int(c) for c in self.old_class_set)
            if not observed <= old:
                raise DatasetError("labelled samples use classes outside old_class_set")
        if len(old) < 1:
            raise DatasetError("at least one labelled class is required")
        if np.any(labels < UNLABELLED):
            raise DatasetError("negative class ids other than -1 are not allowed")
        truth = self.true_labels
        if truth is not None:
            truth = np.asarray(truth, dtype=np.int64)
            if truth.shape != labels.shape:
                raise DatasetError("true_labels must cover every sample")
            truth.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "true_labels", truth)
        object.__setattr__(self, "old_class_set", old)

    @property
    def k_labelled(self) -> int:
        return len(self.old_class_set)

    @property
    def labelled_mask(self) -> np.ndarray:
        return self.labels != UNLABELLED

    @property
    def labelled_ids(self) -> np.ndarray:
        return np.flatnonzero(self.labels != UNLABELLED)

    @property
    def unlabelled_ids(self) -> np.ndarray:
        return np.flatnonzero(self.labels == UNLABELLED)


def normalize_rows(x) -> np.ndarray:
    """L2-normalize each row; zero rows are an error, not a silent skip."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DatasetError("embeddings contain non-finite values")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0)
    if zero.size:
        raise DatasetError(f"zero-norm row {int(zero[0])} cannot be normalized")
    return x / norms


def class_counts(labels) -> np.ndarray:
    """Per-class sample counts sorted descending (empty classes omitted)."""
    labels = np.asarray(labels)
    labels = labels[labels != UNLABELLED]
    _, counts = np.unique(labels, return_counts=True)
    return np.sort(counts)[::-1]


def imbalance_factor(counts: Sequence[int]) -> float:
    """Ratio of the largest to the smallest class count."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise DatasetError("imbalance factor of an empty count vector")
    if np.any(counts <= 0):
        raise DatasetError("class counts must be positive")
    return float(counts.max() / counts.min())


def long_tail_counts(k_classes: int, imbalance: float, head_count: int) -> np.ndarray:
    """Geometric profile ``N_k = head * imbalance**(-(k-1)/(K-1))``, rounded half up."""
    if k_classes < 2:
        raise DatasetError("need at least two classes")
    if imbalance < 1:
        raise DatasetError("imbalance must be >= 1")
    if head_count < k_classes:
        raise DatasetError("head_count must be >= k_classes")
    exps = np.arange(k_classes) / (k_classes - 1)
    counts = np.floor(head_count * imbalance ** (-exps) + 0.5).astype(np.int64)
    if counts[-1] < 1:
        raise DatasetError(
            f"tail class rounds to 0 samples (imbalance {imbalance} too large for head {head_count})"
        )
    return counts


def _sphere_means(rng: np.random.Generator, k: int, dim: int, max_cos: float = 0.95) -> np.ndarray:
    means = np.empty((k, dim))
    filled = 0
    attempts = 0
    while filled < k:
        attempts += 1
        if attempts > 10_000 * k:
            raise DatasetError(f"cannot place {k} means with pairwise cosine < {max_cos} in d={dim}")
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if filled and np.max(means[:filled] @ v) >= max_cos:
            continue
        means[filled] = v
        filled += 1
    return means


def generate_synthetic(
    k_classes: int,
    dim: int,
    imbalance: float = 10.0,
    head_count: int = 200,
    seed: int = 0,
    intra_spread: float = 0.08,
) -> tuple[EmbeddingSet, LabelInfo]:
    """Long-tailed Gaussian mixture on the unit sphere.

    Class ``k`` (0-based) receives ``long_tail_counts(...)[k]`` samples drawn
    from an isotropic Gaussian around a random unit mean and re-normalized.
    The returned LabelInfo is fully labelled; use :func:`split_labelled` to
    derive a GCD split.
    """
    if dim < 2:
        raise DatasetError("dim must be >= 2")
    if intra_spread <= 0:
        raise DatasetError("intra_spread must be positive")
    counts = long_tail_counts(k_classes, imbalance, head_count)
    rng = np.random.default_rng(seed)
    means = _sphere_means(rng, k_classes, dim)
    truth = np.repeat(np.arange(k_classes), counts)
    raw = means[truth] + intra_spread * rng.standard_normal((truth.size, dim))
    emb = EmbeddingSet.from_raw(raw)
    return emb, LabelInfo(labels=truth.copy(), true_labels=truth, old_class_set=frozenset(range(k_classes)))


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_labelled(
    info: LabelInfo,
    frac_old_classes: float = 0.5,
    frac_labelled: float = 0.5,
    seed: int = 0,
) -> LabelInfo:
    """Mark the largest classes as old and label a fraction of their samples.

    Class ids are first re-ranked by descending size (ties keep id order) so
    the old classes occupy ids ``0..n_old-1``.
    """
    if not (0 < frac_old_classes <= 1 and 0 < frac_labelled <= 1):
        raise DatasetError("fractions must lie in (0, 1]")
    truth = info.true_labels if info.true_labels is not None else info.labels
    if np.any(truth == UNLABELLED):
        raise DatasetError("splitting requires ground truth for every sample")
    ids, counts = np.unique(truth, return_counts=True)
    order = np.lexsort((ids, -counts))
    remap = np.empty(ids.max() + 1, dtype=np.int64)
    remap[ids[order]] = np.arange(ids.size)
    truth = remap[truth]
    counts = counts[order]

    n_old = math.ceil(frac_old_classes * ids.size - 1e-9)
    rng = np.random.default_rng(seed)
    labels = np.full(truth.size, UNLABELLED, dtype=np.int64)
    for c in range(n_old):
        members = np.flatnonzero(truth == c)
        n_lab = _half_up(frac_labelled * counts[c])
        if n_lab == 0:
            raise DatasetError(f"old class {c} with {counts[c]} samples would get 0 labelled samples")
        chosen = rng.choice(members, size=n_lab, replace=False)
        labels[chosen] = c
    return LabelInfo(labels=labels, true_labels=truth, old_class_set=frozenset(range(n_old)))


# ---------------------------------------------------------------- disk format


def _read_ints(path: Path) -> np.ndarray:
    text = path.read_text().split()
    try:
        return np.array([int(t) for t in text], dtype=np.int64)
    except ValueError as exc:
        raise DatasetError(f"{path}: non-integer label entry") from exc


def load_dataset(manifest_path) -> tuple[EmbeddingSet, LabelInfo]:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    meta = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    try:
        n, d = int(meta["n"]), int(meta["d"])
        data_path = root / meta["data"]
        labels_path = root / meta["labels"]
    except KeyError as exc:
        raise DatasetError(f"manifest missing field {exc}") from exc
    if meta.get("dtype", "f32") != "f32":
        raise DatasetError(f"unsupported dtype {meta['dtype']!r}")
    for p in (data_path, labels_path):
        if not p.is_file():
            raise DatasetError(f"missing file: {p}")
    raw = data_path.read_bytes()
    if len(raw) != n * d * 4:
        raise DatasetError(f"{data_path}: expected {n * d * 4} bytes for n={n}, d={d}, found {len(raw)}")
    x = np.frombuffer(raw, dtype="<f4").reshape(n, d)
    emb = EmbeddingSet.from_raw(x)

    labels = _read_ints(labels_path)
    if labels.size != n:
        raise DatasetError(f"label count mismatch: {labels.size} labels for n={n}")
    truth = None
    if meta.get("true_labels"):
        tpath = root / meta["true_labels"]
        if not tpath.is_file():
            raise DatasetError(f"missing file: {tpath}")
        truth = _read_ints(tpath)
        if truth.size != n:
            raise DatasetError(f"true label count mismatch: {truth.size} for n={n}")
    n_classes = meta.get("classes")
    if n_classes is not None:
        for arr in (labels, truth):
            if arr is not None and np.any(arr >= int(n_classes)):
                raise DatasetError(f"label id >= declared class count {n_classes}")
    return emb, LabelInfo(labels=labels, true_labels=truth)


def save_dataset(directory, emb: EmbeddingSet, info: LabelInfo, name: str = "dataset") -> Path:
    """Write manifest + data + label files; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data_file = f"{name}.f32"
    (directory / data_file).write_bytes(np.ascontiguousarray(emb.data, dtype="<f4").tobytes())
    (directory / f"{name}.labels.txt").write_text("".join(f"{v}\n" for v in info.labels))
    meta = {"n": emb.n, "d": emb.d, "dtype": "f32", "data": data_file, "labels": f"{name}.labels.txt"}
    if info.true_labels is not None:
        (directory / f"{name}.truth.txt").write_text("".join(f"{v}\n" for v in info.true_labels))
        meta["true_labels"] = f"{name}.truth.txt"
        meta["classes"] = int(info.true_labels.max()) + 1
    manifest = directory / f"{name}.json"
    manifest.write_text(json.dumps(meta, indent=2) + "\n")
    return manifest
