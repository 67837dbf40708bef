"""Hungarian-matched clustering accuracy and GCD reports."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .store import imbalance_factor


def hungarian(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect assignment.

    Rectangular matrices are zero-padded to square. Returns ``assignment``
    with ``assignment[row] = column`` over the padded square, and the total
    cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError("cost must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    m = max(cost.shape)
    square = np.zeros((m, m))
    square[: cost.shape[0], : cost.shape[1]] = cost
    rows, cols = linear_sum_assignment(square)
    assignment = np.empty(m, dtype=np.int64)
    assignment[rows] = cols
    return assignment, float(square[rows, cols].sum())


def _contingency(pred: np.ndarray, truth: np.ndarray):
    clusters, p_idx = np.unique(pred, return_inverse=True)
    classes, t_idx = np.unique(truth, return_inverse=True)
    table = np.zeros((clusters.size, classes.size), dtype=np.int64)
    np.add.at(table, (p_idx, t_idx), 1)
    return table, clusters, classes


def _match(pred, truth) -> dict[int, int]:
    table, clusters, classes = _contingency(pred, truth)
    assignment, _ = hungarian(-table)
    matching = {}
    for r, c in enumerate(assignment[: clusters.size]):
        if c < classes.size:
            matching[int(clusters[r])] = int(classes[c])
    return matching


def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size == 0:
        raise ValueError("clustering accuracy of an empty set")
    return pred, truth


def _mapped(pred, matching) -> np.ndarray:
    # unmatched clusters map to a class id no sample can carry
    clusters = np.unique(pred)
    lut = np.array([matching.get(int(c), -(10**9)) for c in clusters], dtype=np.int64)
    return lut[np.searchsorted(clusters, pred)]


def clustering_acc(pred, truth) -> tuple[float, dict[int, int]]:
    """Best one-to-one cluster-to-class matching accuracy."""
    pred, truth = _check_pair(pred, truth)
    matching = _match(pred, truth)
    acc = float(np.mean(_mapped(pred, matching) == truth))
    return acc, matching


@dataclass
class EvalReport:
    acc_all: float
    acc_old: float | None
    acc_new: float | None
    balanced_acc: float
    balanced_acc_old: float | None
    balanced_acc_new: float | None
    per_class_acc: dict[int, float]
    matching: dict[int, int]
    lambda_selected: float | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["per_class_acc"] = {str(k): v for k, v in self.per_class_acc.items()}
        out["matching"] = {str(k): v for k, v in self.matching.items()}
        return out


def gcd_report(pred, truth, old_class_set, selected_subset=None) -> EvalReport:
    """All/Old/New accuracy under one global matching, raw and class-balanced.

    ``selected_subset`` holds positions into ``pred``/``truth``; when given,
    ``lambda_selected`` is the imbalance factor of the true classes inside it.
    """
    pred, truth = _check_pair(pred, truth)
    matching = _match(pred, truth)
    correct = _mapped(pred, matching) == truth
    old = np.isin(truth, np.fromiter(old_class_set, dtype=np.int64, count=len(old_class_set)))

    per_class = {int(c): float(correct[truth == c].mean()) for c in np.unique(truth)}

    def balanced(classes):
        vals = [per_class[c] for c in classes]
        return float(np.mean(vals)) if vals else None

    old_classes = [c for c in per_class if c in old_class_set]
    new_classes = [c for c in per_class if c not in old_class_set]
    lam = None
    if selected_subset is not None:
        sel = np.asarray(selected_subset, dtype=np.int64)
        if sel.size:
            _, counts = np.unique(truth[sel], return_counts=True)
            lam = imbalance_factor(counts)
    return EvalReport(
        acc_all=float(correct.mean()),
        acc_old=float(correct[old].mean()) if old.any() else None,
        acc_new=float(correct[~old].mean()) if (~old).any() else None,
        balanced_acc=balanced(list(per_class)),
        balanced_acc_old=balanced(old_classes),
        balanced_acc_new=balanced(new_classes),
        per_class_acc=per_class,
        matching=matching,
        lambda_selected=lam,
        counts={"all": int(truth.size), "old": int(old.sum()), "new": int((~old).sum())},
    )
