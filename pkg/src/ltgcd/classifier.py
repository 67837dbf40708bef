"""Cosine prototype classifier trained on frozen embeddings.

Only the prototype matrix is learned. The gradient of the combined
objective

    L = (1 - lambda_cls) * L_unsup + lambda_cls * L_sup + prior_weight * L_prior

is derived by hand (including the Jacobian of the row normalization) and
applied with plain SGD under a cosine learning-rate schedule. Teacher
predictions are stop-gradient targets.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .density import AFFINITY_ONLY, compute_density, find_peaks, nmds
from .knn import KnnGraph, build_knn
from .selection import SelectionConfig, SelectionResult, resample_epoch
from .store import EmbeddingSet, LabelInfo, normalize_rows

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PrototypeSet:
    prototypes: np.ndarray
    tau_s: float = 0.1
    tau_t: float = 0.05

    def __post_init__(self):
        self.prototypes = np.array(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 2:
            raise ValueError("need a K x d prototype matrix with K >= 2")
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise ValueError("temperatures must be positive")

    @property
    def K(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    def normalized(self) -> np.ndarray:
        norms = np.linalg.norm(self.prototypes, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero-norm prototype row")
        return self.prototypes / norms

    def copy(self) -> "PrototypeSet":
        return PrototypeSet(self.prototypes.copy(), self.tau_s, self.tau_t)


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def logits(h, prototypes: PrototypeSet, tau: float | None = None) -> np.ndarray:
    """Cosine logits ``<h, c_k/|c_k|> / tau`` for one vector or a row batch."""
    tau = prototypes.tau_s if tau is None else tau
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return np.asarray(h, dtype=np.float64) @ prototypes.normalized().T / tau


def predict(h, prototypes: PrototypeSet, tau: float | None = None) -> np.ndarray:
    return softmax(logits(h, prototypes, tau))


def cross_entropy(q, p, floor: float = LOG_FLOOR) -> tuple[float, int]:
    """``-sum q log p`` with ``p`` floored; returns (value, entries clamped where q > 0)."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    clamped = int(np.sum((p < floor) & (q > 0)))
    return float(-np.sum(q * np.log(np.maximum(p, floor)))), clamped


def entropy(p) -> float:
    return cross_entropy(p, p)[0]


def _nonempty(h, what: str) -> np.ndarray:
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if h.shape[0] == 0:
        raise ValueError(f"empty {what} batch")
    return h


def loss_supervised(h, y, prototypes: PrototypeSet, tau_s: float | None = None) -> float:
    """Mean cross-entropy of labelled views against their labels."""
    h = _nonempty(h, "labelled")
    y = np.asarray(y, dtype=np.int64)
    if np.any((y < 0) | (y >= prototypes.K)):
        raise ValueError("labels must lie in 0..K-1")
    logp = log_softmax(logits(h, prototypes, tau_s))
    return float(-np.mean(logp[np.arange(len(y)), y]))


def batch_mean_prediction(p_hat, p_tilde) -> np.ndarray:
    return 0.5 * (np.mean(p_hat, axis=0) + np.mean(p_tilde, axis=0))


def loss_unsupervised(
    h_hat,
    h_tilde,
    prototypes: PrototypeSet,
    eps_entropy: float = 1.0,
    *,
    tau_s: float | None = None,
    tau_t: float | None = None,
    teacher: PrototypeSet | None = None,
) -> float:
    """Self-distillation cross-entropy minus the mean-entropy bonus.

    ``teacher`` overrides the prototypes used for the sharpened targets
    (useful for holding targets fixed while perturbing the student).
    """
    h_hat = _nonempty(h_hat, "unlabelled")
    h_tilde = _nonempty(h_tilde, "unlabelled")
    teacher = prototypes if teacher is None else teacher
    p_hat = predict(h_hat, prototypes, tau_s)
    p_tilde = predict(h_tilde, teacher, teacher.tau_t if tau_t is None else tau_t)
    ce = np.mean([cross_entropy(t, s)[0] for t, s in zip(p_tilde, p_hat)])
    return float(ce - eps_entropy * entropy(batch_mean_prediction(p_hat, p_tilde)))


def loss_prior(p_bar, p_prior) -> float:
    """Cross-entropy of the batch-mean prediction against the selection prior."""
    return cross_entropy(p_prior, p_bar)[0]


def _info_nce_rows(z: np.ndarray, positives: np.ndarray, temperature: float) -> np.ndarray:
    sim = z @ z.T / temperature
    np.fill_diagonal(sim, -np.inf)
    log_prob = sim - np.log(np.exp(sim - sim.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True)) - sim.max(axis=1, keepdims=True)
    np.fill_diagonal(log_prob, 0.0)
    return -(positives * log_prob).sum(axis=1) / positives.sum(axis=1)


def loss_representation(z_a, z_b, labels=None, lambda_rep: float = 0.35, temperature: float = 0.07) -> float:
    """Forward value of the mixed self-/supervised contrastive loss (monitoring only).

    The self-supervised part treats the two views of each sample as the only
    positive pair; the supervised part runs on labelled samples (label >= 0)
    with every same-label view as a positive.
    """
    z_a = normalize_rows(_nonempty(z_a, "view"))
    z_b = normalize_rows(_nonempty(z_b, "view"))
    b = z_a.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs at least two samples")
    z = np.vstack([z_a, z_b])
    idx = np.arange(2 * b)
    pos = np.zeros((2 * b, 2 * b))
    pos[idx, (idx + b) % (2 * b)] = 1.0
    selfcon = float(np.mean(_info_nce_rows(z, pos, temperature)))
    if lambda_rep == 0:
        return selfcon

    labels = np.full(b, -1) if labels is None else np.asarray(labels, dtype=np.int64)
    lab = np.flatnonzero(labels >= 0)
    if lab.size == 0:
        raise ValueError("supervised contrastive term needs labelled samples")
    zl = np.vstack([z_a[lab], z_b[lab]])
    yl = np.concatenate([labels[lab], labels[lab]])
    pos = (yl[:, None] == yl[None, :]).astype(np.float64)
    np.fill_diagonal(pos, 0.0)
    supcon = float(np.mean(_info_nce_rows(zl, pos, temperature)))
    return (1 - lambda_rep) * selfcon + lambda_rep * supcon


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    n_classes: int | None = None
    lambda_cls: float = 0.35
    lambda_rep: float = 0.35
    eps_entropy: float = 0.3
    tau_s: float = 0.1
    tau_t: float = 0.05
    rep_temperature: float = 0.07
    lr: float = 0.1
    epochs: int = 50
    batch_size: int = 128
    sigma_view: float = 0.05
    use_selection: bool = True
    prior_loss: bool = True
    prior_weight: float = 1.0
    selection: SelectionConfig = field(default_factory=SelectionConfig)

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_rep"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.eps_entropy < 0 or self.prior_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1 or self.lr <= 0 or self.sigma_view < 0:
            raise ValueError("epochs >= 1, lr > 0 and sigma_view >= 0 are required")
        if self.n_classes is not None and self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if isinstance(self.selection, dict):
            self.selection = SelectionConfig(**self.selection)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Two views per sample; the first ``n_labelled`` rows carry labels ``y``."""

    h_hat: np.ndarray
    h_tilde: np.ndarray
    y: np.ndarray
    p_prior: np.ndarray | None = None

    @property
    def n_labelled(self) -> int:
        return len(self.y)


def loss_and_grad(batch: Batch, prototypes: PrototypeSet, config: TrainConfig, teacher: PrototypeSet | None = None):
    """Combined loss, its gradient w.r.t. the raw prototype rows, and a parts dict."""
    teacher = prototypes if teacher is None else teacher
    c = prototypes.prototypes
    norms = np.linalg.norm(c, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm prototype row")
    c_hat = c / norms
    h_hat, h_tilde = batch.h_hat, batch.h_tilde
    nb, nl = h_hat.shape[0], batch.n_labelled
    if nb < 2:
        raise ValueError("batch needs at least two samples")

    z = h_hat @ c_hat.T / prototypes.tau_s
    logp_hat = log_softmax(z)
    p_hat = np.exp(logp_hat)
    p_tilde = softmax(h_tilde @ teacher.normalized().T / teacher.tau_t)
    p_bar = batch_mean_prediction(p_hat, p_tilde)
    p_bar_f = np.maximum(p_bar, LOG_FLOOR)
    live = p_bar >= LOG_FLOOR
    clamps = int(np.sum(~live))

    w_u = 1.0 - config.lambda_cls
    ce_u = float(-np.sum(p_tilde * logp_hat) / nb)
    ent = float(-np.sum(p_bar * np.log(p_bar_f)))
    g_z = w_u * (p_hat - p_tilde) / nb
    # d/dp_bar of -eps * H(p_bar)
    g_bar = w_u * config.eps_entropy * (np.log(p_bar_f) + live)

    l_prior = 0.0
    if batch.p_prior is not None and config.prior_loss:
        l_prior, n = cross_entropy(batch.p_prior, p_bar)
        clamps += n
        g_bar = g_bar - config.prior_weight * np.where(live, batch.p_prior / p_bar_f, 0.0)

    # p_bar depends on each student row with weight 1 / (2 nb); push through softmax
    u = g_bar / (2 * nb)
    g_z += p_hat * (u[None, :] - (p_hat @ u)[:, None])

    l_sup = 0.0
    if nl:
        y = batch.y
        l_sup = float(-np.mean(logp_hat[np.arange(nl), y]))
        onehot = np.zeros((nl, c.shape[0]))
        onehot[np.arange(nl), y] = 1.0
        g_z[:nl] += config.lambda_cls * (p_hat[:nl] - onehot) / nl

    g_chat = g_z.T @ h_hat / prototypes.tau_s
    grad = (g_chat - c_hat * np.sum(g_chat * c_hat, axis=1, keepdims=True)) / norms

    total = w_u * (ce_u - config.eps_entropy * ent) + config.lambda_cls * l_sup + config.prior_weight * l_prior
    parts = {"loss_sup": l_sup, "loss_unsup": ce_u - config.eps_entropy * ent,
             "loss_prior": l_prior, "clamp_events": clamps}
    return total, grad, parts


def grad_prototypes(batch: Batch, prototypes: PrototypeSet, config: TrainConfig) -> np.ndarray:
    return loss_and_grad(batch, prototypes, config)[1]


def _new_prototype_candidates(x: np.ndarray, graph: KnnGraph, unl: np.ndarray, sel: SelectionConfig, lambda_nmds: float) -> np.ndarray:
    dens = compute_density(graph.truncate(sel.k), mode=AFFINITY_ONLY)
    raw = find_peaks(dens, graph.truncate(sel.k), candidates=unl)
    peaks = nmds(zip(raw, dens.densities[raw]), k_s=sel.k_s, lambda_nmds=lambda_nmds, graph=graph)
    return peaks.peak_ids


def init_prototypes(
    embeddings: EmbeddingSet,
    info: LabelInfo,
    n_classes: int,
    *,
    tau_s: float = 0.1,
    tau_t: float = 0.05,
    graph: KnnGraph | None = None,
    selection: SelectionConfig = SelectionConfig(),
    lambda_nmds: float = 0.08,
    seed: int = 0,
) -> PrototypeSet:
    """Old-class rows from labelled means; the rest from unclaimed density peaks.

    A peak is claimed when its neighborhood holds labelled samples at more than
    half the rate seen around labelled samples themselves (it sits in an old
    class), or when an already chosen prototype is at least as similar to it
    as its own k nearest neighbors are on average. Shortfalls are filled with
    the remaining peaks, then with random unlabelled samples.
    """
    x = embeddings.data
    old = sorted(info.old_class_set)
    if old[-1] >= n_classes:
        raise ValueError(f"labelled class id {old[-1]} does not fit n_classes={n_classes}")
    protos = np.zeros((n_classes, x.shape[1]))
    filled = np.zeros(n_classes, dtype=bool)
    lab = info.labelled_ids
    for c in old:
        protos[c] = x[lab[info.labels[lab] == c]].mean(axis=0)
        filled[c] = True
    protos[filled] = normalize_rows(protos[filled])

    free = list(np.flatnonzero(~filled))
    if free:
        need = max(selection.k, selection.k_s)
        if graph is None or graph.k < need:
            graph = build_knn(x, need)
        unl = info.unlabelled_ids
        peaks = _new_prototype_candidates(x, graph, unl, selection, lambda_nmds)
        scale = graph.affinities[:, : selection.k].mean(axis=1)
        neigh = graph.neighbors[:, : selection.k_s]
        lab_rate = info.labelled_mask[neigh].mean(axis=1)
        old_rate = lab_rate[lab].mean() if lab.size else np.inf
        chosen = [protos[c] for c in np.flatnonzero(filled)]
        leftovers = []
        for p in peaks:
            if not free:
                break
            if lab_rate[p] > 0.5 * old_rate or (chosen and np.max(np.asarray(chosen) @ x[p]) >= scale[p]):
                leftovers.append(p)
                continue
            slot = free.pop(0)
            protos[slot] = x[p]
            chosen.append(x[p])
        rng = np.random.default_rng(seed)
        spare = leftovers + list(rng.permutation(np.setdiff1d(unl, peaks)))
        while free and spare:
            protos[free.pop(0)] = x[spare.pop(0)]
        if free:
            raise ValueError("not enough samples to initialize every prototype")
    return PrototypeSet(protos, tau_s, tau_t)


@dataclass
class TrainResult:
    prototypes: PrototypeSet
    history: list[dict]
    selections: list[SelectionResult]

    def __iter__(self):
        return iter((self.prototypes, self.history))


def _views(x: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    if sigma == 0:
        return x.copy()
    return normalize_rows(x + sigma * rng.standard_normal(x.shape))


def train(
    embeddings: EmbeddingSet,
    info: LabelInfo,
    config: TrainConfig,
    seed: int = 0,
    *,
    graph: KnnGraph | None = None,
    init: PrototypeSet | None = None,
) -> TrainResult:
    """Epoch loop: SGD on prototypes, then re-select the unlabelled pool.

    Epoch 0 draws unlabelled batches from the whole unlabelled set; later
    epochs use the previous epoch's selection and its prior (when enabled).
    """
    if config.n_classes is None:
        raise ValueError("config.n_classes must be set (estimate it first if unknown)")
    x = embeddings.data
    lab, unl = info.labelled_ids, info.unlabelled_ids
    if lab.size == 0:
        raise ValueError("training needs labelled samples")
    sel_cfg = config.selection
    if graph is None or graph.k < max(sel_cfg.k, sel_cfg.k_s):
        graph = build_knn(x, max(sel_cfg.k, sel_cfg.k_s))
    protos = init.copy() if init is not None else init_prototypes(
        embeddings, info, config.n_classes, tau_s=config.tau_s, tau_t=config.tau_t,
        graph=graph, selection=sel_cfg, seed=seed,
    )
    rng = np.random.default_rng(seed)
    pool, prior = unl, None
    history, selections = [], []
    for epoch in range(config.epochs):
        lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
        ids = rng.permutation(np.concatenate([lab, pool]))
        n_batches = max(1, math.ceil(len(ids) / config.batch_size))
        sums = {"loss_sup": 0.0, "loss_unsup": 0.0, "loss_prior": 0.0, "loss_rep": 0.0}
        clamps = 0
        for chunk in np.array_split(ids, n_batches):
            is_lab = info.labels[chunk] >= 0
            chunk = np.concatenate([chunk[is_lab], chunk[~is_lab]])
            h_hat = _views(x[chunk], rng, config.sigma_view)
            h_tilde = _views(x[chunk], rng, config.sigma_view)
            batch = Batch(h_hat, h_tilde, info.labels[chunk[: is_lab.sum()]], prior)
            loss, grad, parts = loss_and_grad(batch, protos, config)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {parts}")
            protos.prototypes -= lr * grad
            for key in ("loss_sup", "loss_unsup", "loss_prior"):
                sums[key] += parts[key]
            clamps += parts["clamp_events"]
            if config.lambda_rep == 0 or is_lab.any():
                sums["loss_rep"] += loss_representation(
                    h_hat, h_tilde, info.labels[chunk], config.lambda_rep, config.rep_temperature
                )

        probs_t = predict(x, protos, protos.tau_t)
        stats = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "lr": lr}
        if config.use_selection:
            sel = resample_epoch(embeddings, info, probs_t, sel_cfg, epoch, graph=graph)
            selections.append(sel)
            pool = sel.union_ids
            prior = sel.prior if config.prior_loss else None
            stats.update({"S_conf": int(sel.conf_ids.size), "S_dens": int(sel.dens_ids.size),
                          "S": int(sel.union_ids.size), "fallback": sel.fallback})
        else:
            stats.update({"S_conf": 0, "S_dens": 0, "S": int(unl.size), "fallback": False})
        stats["clamp_events"] = clamps
        history.append(stats)
        log.debug("epoch %d %s", epoch, stats)
    return TrainResult(protos, history, selections)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, prototypes: PrototypeSet, epoch: int) -> None:
    """One JSON header line, then the raw little-endian f32 prototype matrix."""
    header = {"K": prototypes.K, "d": prototypes.d, "tau_s": prototypes.tau_s,
              "tau_t": prototypes.tau_t, "epoch": epoch}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(np.ascontiguousarray(prototypes.prototypes, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[PrototypeSet, dict]:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut])
    body = raw[cut + 1 :]
    k, d = int(header["K"]), int(header["d"])
    if len(body) != k * d * 4:
        raise ValueError(f"{path}: expected {k * d * 4} matrix bytes, found {len(body)}")
    mat = np.frombuffer(body, dtype="<f4").reshape(k, d).astype(np.float64)
    return PrototypeSet(mat, float(header["tau_s"]), float(header["tau_t"])), header
