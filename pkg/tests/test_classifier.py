import math

import numpy as np
import pytest

from ltgcd.classifier import (
    Batch,
    PrototypeSet,
    TrainConfig,
    TrainingDiverged,
    batch_mean_prediction,
    cross_entropy,
    entropy,
    grad_prototypes,
    init_prototypes,
    load_checkpoint,
    logits,
    loss_and_grad,
    loss_prior,
    loss_representation,
    loss_supervised,
    loss_unsupervised,
    predict,
    save_checkpoint,
    train,
)
from ltgcd.store import LabelInfo, EmbeddingSet, normalize_rows

from .oracles import central_difference, composed_loss, random_fixture


def _relerr(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


def test_logits_examples():
    P = PrototypeSet(np.array([[3.0, 0.0], [0.0, 2.0]]))
    assert logits(np.array([1.0, 0.0]), P, 1.0)[0] == pytest.approx(1.0)
    P3 = PrototypeSet(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    np.testing.assert_array_equal(logits(np.array([0, 0, 1.0]), P3, 1.0), 0.0)
    h = normalize_rows(np.array([[0.3, 0.7]]))
    np.testing.assert_allclose(logits(h, P, 0.1), 10 * logits(h, P, 1.0))
    with pytest.raises(ValueError):
        logits(h, PrototypeSet(np.array([[0.0, 0.0], [1.0, 0.0]])), 1.0)
    with pytest.raises(ValueError):
        logits(h, P, 0.0)


def test_predict_examples():
    P = PrototypeSet(np.eye(3)[:2])
    np.testing.assert_allclose(predict(np.array([0, 0, 1.0]), P, 1.0), [0.5, 0.5])
    e = math.e
    np.testing.assert_allclose(predict(np.array([1.0, 0, 0]), P, 1.0), [e / (e + 1), 1 / (e + 1)])
    h = normalize_rows(np.array([[0.8, 0.5, 0.1]]))
    tops = [predict(h, P, tau).max() for tau in (2.0, 1.0, 0.5, 0.1, 0.01)]
    assert np.all(np.diff(tops) > 0)


def test_supervised_examples(rng):
    P = PrototypeSet(np.eye(4))
    assert loss_supervised(np.eye(4), np.arange(4), P, tau_s=1e-3) < 1e-10
    P10 = PrototypeSet(np.eye(11)[:10])
    h = np.tile(np.eye(11)[10], (3, 1))
    assert loss_supervised(h, [0, 4, 9], P10) == pytest.approx(math.log(10))
    P = PrototypeSet(rng.standard_normal((5, 6)), tau_s=0.3)
    h = normalize_rows(rng.standard_normal((7, 6)))
    y = rng.integers(0, 5, 7)
    direct = []
    for hi, yi in zip(h, y):
        z = np.array([hi @ c / np.linalg.norm(c) / 0.3 for c in P.prototypes])
        direct.append(-(z[yi] - math.log(np.sum(np.exp(z)))))
    assert loss_supervised(h, y, P) == pytest.approx(np.mean(direct), abs=1e-10)
    with pytest.raises(ValueError):
        loss_supervised(np.empty((0, 6)), [], P)
    with pytest.raises(ValueError):
        loss_supervised(h, np.full(7, 5), P)


def test_unsupervised_examples(rng):
    P = PrototypeSet(rng.standard_normal((4, 5)), tau_s=0.2, tau_t=0.2)
    h = normalize_rows(rng.standard_normal((6, 5)))
    p = predict(h, P)
    expected = np.mean([-(row * np.log(row)).sum() for row in p])
    assert loss_unsupervised(h, h, P, 0.0) == pytest.approx(expected, abs=1e-12)

    P4 = PrototypeSet(np.eye(5)[:4])
    h = np.tile(np.eye(5)[4], (3, 1))
    assert loss_unsupervised(h, h, P4, 0.7) == pytest.approx(math.log(4) - 0.7 * math.log(4))

    P = PrototypeSet(rng.standard_normal((3, 4)), tau_s=0.5, tau_t=0.25)
    ha, hb = normalize_rows(rng.standard_normal((5, 4))), normalize_rows(rng.standard_normal((5, 4)))
    cn = P.prototypes / np.linalg.norm(P.prototypes, axis=1, keepdims=True)
    sm = lambda z: np.exp(z) / np.exp(z).sum()  # noqa: E731
    ps = [sm(cn @ v / 0.5) for v in ha]
    pt = [sm(cn @ v / 0.25) for v in hb]
    ce = np.mean([-(t * np.log(s)).sum() for s, t in zip(ps, pt)])
    pbar = 0.5 * (np.mean(ps, axis=0) + np.mean(pt, axis=0))
    expected = ce - 0.5 * -(pbar * np.log(pbar)).sum()
    assert loss_unsupervised(ha, hb, P, 0.5) == pytest.approx(expected, abs=1e-10)
    with pytest.raises(ValueError):
        loss_unsupervised(np.empty((0, 4)), np.empty((0, 4)), P)


def test_prior_examples(rng):
    p = rng.dirichlet(np.ones(5))
    assert loss_prior(p, p) == pytest.approx(entropy(p))
    assert loss_prior(np.full(4, 0.25), np.full(4, 0.25)) == pytest.approx(math.log(4))
    q = rng.dirichlet(np.ones(5))
    assert loss_prior(q, p) > entropy(p)


def test_cross_entropy_floor_counts_clamps():
    value, clamped = cross_entropy([0.5, 0.5], [1.0, 0.0])
    assert clamped == 1
    assert value == pytest.approx(-0.5 * math.log(1e-12))


def test_representation_selfcon_only(rng):
    a = normalize_rows(rng.standard_normal((4, 6)))
    b = normalize_rows(rng.standard_normal((4, 6)))
    assert loss_representation(a, b, None, 0.0) == loss_representation(a, b, [0, 1, -1, -1], 0.0)


def test_representation_two_orthogonal_pairs():
    e = np.eye(2)
    # each row: one positive at similarity 1, two negatives at 0
    assert loss_representation(e, e, None, 0.0, temperature=1.0) == pytest.approx(math.log(1 + 2 / math.e))


def test_representation_supcon_shared_label(rng):
    z = normalize_rows(rng.standard_normal((3, 5)))
    allz = np.vstack([z, z])
    sims = allz @ allz.T / 0.5
    rows = []
    for i in range(6):
        others = [j for j in range(6) if j != i]
        denom = np.log(np.sum(np.exp(sims[i, others])))
        rows.append(-np.mean([sims[i, j] - denom for j in others]))
    assert loss_representation(z, z, [2, 2, 2], 1.0, temperature=0.5) == pytest.approx(np.mean(rows), abs=1e-10)


def test_representation_errors(rng):
    z = normalize_rows(rng.standard_normal((3, 4)))
    with pytest.raises(ValueError):
        loss_representation(z, z, [-1, -1, -1], 0.5)
    with pytest.raises(ValueError):
        loss_representation(z[:1], z[:1], None, 0.0)


def test_loss_and_grad_total_matches_composed(rng):
    for _ in range(20):
        batch, P = random_fixture(rng)
        cfg = TrainConfig(lambda_cls=rng.uniform(0, 1), eps_entropy=rng.uniform(0, 2), prior_weight=rng.uniform(0, 2))
        total, _, _ = loss_and_grad(batch, P, cfg)
        assert total == pytest.approx(composed_loss(batch, P, cfg, P), abs=1e-10)


def test_gradient_finite_differences(rng):
    worst = 0.0
    for _ in range(25):
        batch, P = random_fixture(rng)
        cfg = TrainConfig(lambda_cls=rng.uniform(0.1, 0.9), eps_entropy=rng.uniform(0.1, 2), prior_weight=rng.uniform(0.1, 2))
        teacher = P.copy()
        f = lambda m: composed_loss(batch, PrototypeSet(m, P.tau_s, P.tau_t), cfg, teacher)  # noqa: E731
        worst = max(worst, _relerr(grad_prototypes(batch, P, cfg), central_difference(f, P.prototypes)))
    assert worst < 1e-4


def test_gradient_zero_at_symmetric_minimum():
    P = PrototypeSet(np.array([[2.0, 0.0], [-1.0, 0.0]]))
    h = np.array([[1.0, 0.0], [-1.0, 0.0]])
    batch = Batch(h, h, np.array([0, 1]))
    cfg = TrainConfig(lambda_cls=1.0, prior_loss=False)
    assert np.linalg.norm(grad_prototypes(batch, P, cfg)) < 1e-6


def test_gradient_sample_on_prototype_direction(rng):
    c = rng.standard_normal((3, 4))
    h = (c[1] / np.linalg.norm(c[1]))[None, :]
    batch = Batch(np.vstack([h, h]), np.vstack([h, h]), np.array([1, 1]))
    P = PrototypeSet(c)
    cfg = TrainConfig(lambda_cls=1.0, prior_loss=False)
    g = grad_prototypes(batch, P, cfg)
    f = lambda m: composed_loss(batch, PrototypeSet(m, P.tau_s, P.tau_t), cfg, P.copy())  # noqa: E731
    fd = central_difference(f, c)
    np.testing.assert_allclose(g, fd, atol=1e-8)
    # c_1 is already aligned with the sample: its direction cannot improve
    assert np.linalg.norm(g[1]) < 1e-10
    assert np.linalg.norm(g[[0, 2]]) > 0


def test_argmax_invariant_to_prototype_scale(rng):
    P = PrototypeSet(rng.standard_normal((5, 6)))
    h = normalize_rows(rng.standard_normal((20, 6)))
    scaled = PrototypeSet(P.prototypes * 7.5)
    assert np.array_equal(predict(h, P).argmax(1), predict(h, scaled).argmax(1))


def _toy(rng, n=40):
    h = normalize_rows(np.vstack([rng.normal([1, 0.2], 0.1, (n, 2)), rng.normal([-0.2, 1], 0.1, (n, 2))]))
    y = np.repeat([0, 1], n)
    return EmbeddingSet(h), LabelInfo(y)


def test_train_labelled_toy_converges(rng):
    emb, info = _toy(rng)
    init = PrototypeSet(np.array([[0.0, 1.0], [1.0, 0.0]]))
    cfg = TrainConfig(n_classes=2, lambda_cls=1.0, sigma_view=0.0, epochs=10, batch_size=80, lr=0.5)
    result = train(emb, info, cfg, seed=0, init=init)
    sup = [row["loss_sup"] for row in result.history]
    assert np.all(np.diff(sup) < 0)
    assert np.mean(predict(emb.data, result.prototypes).argmax(1) == info.labels) == 1.0


def test_train_deterministic(lt_split):
    emb, info = lt_split
    cfg = TrainConfig(n_classes=20, epochs=3)
    a, _ = train(emb, info, cfg, seed=5)
    b, _ = train(emb, info, cfg, seed=5)
    assert a.prototypes.tobytes() == b.prototypes.tobytes()


def test_train_history_fields(trained):
    row = trained.history[-1]
    for key in ("epoch", "loss_sup", "loss_unsup", "loss_prior", "loss_rep", "S_conf", "S_dens", "clamp_events"):
        assert key in row
    assert len(trained.history) == 50 and len(trained.selections) == 50


def test_train_requires_classes_and_labels(lt_split):
    emb, info = lt_split
    with pytest.raises(ValueError):
        train(emb, info, TrainConfig())


def test_train_divergence_detected(rng, monkeypatch):
    import ltgcd.classifier as clf

    emb, info = _toy(rng)
    real = clf.loss_and_grad

    def poisoned(*args, **kwargs):
        total, grad, parts = real(*args, **kwargs)
        return float("nan"), grad, parts

    monkeypatch.setattr(clf, "loss_and_grad", poisoned)
    cfg = TrainConfig(n_classes=2, lambda_cls=1.0, epochs=2, sigma_view=0.0)
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train(emb, info, cfg, init=PrototypeSet(np.array([[0.0, 1.0], [1.0, 0.0]])))


def test_init_prototypes(lt_split):
    emb, info = lt_split
    P = init_prototypes(emb, info, 20)
    lab = info.labelled_ids
    for c in sorted(info.old_class_set):
        mean = emb.data[lab[info.labels[lab] == c]].mean(0)
        np.testing.assert_allclose(P.prototypes[c], mean / np.linalg.norm(mean))
    new_rows = P.prototypes[10:]
    unl = emb.data[info.unlabelled_ids]
    assert all(np.any(np.all(np.isclose(unl, r), axis=1)) for r in new_rows)
    # one prototype per new class on this well separated mixture
    t = info.true_labels
    nearest = (emb.data @ P.normalized().T).argmax(1)
    assert len(set(nearest[t >= 10].tolist())) == 10
    with pytest.raises(ValueError):
        init_prototypes(emb, info, 5)


def test_checkpoint_roundtrip(tmp_path, rng):
    P = PrototypeSet(rng.standard_normal((4, 3)), 0.2, 0.07)
    save_checkpoint(tmp_path / "c.bin", P, epoch=9)
    Q, header = load_checkpoint(tmp_path / "c.bin")
    assert header == {"K": 4, "d": 3, "tau_s": 0.2, "tau_t": 0.07, "epoch": 9}
    np.testing.assert_allclose(Q.prototypes, P.prototypes, atol=1e-6)
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")


def test_config_validation():
    for bad in (dict(lambda_cls=1.5), dict(lambda_rep=-0.1), dict(eps_entropy=-1), dict(batch_size=1),
                dict(epochs=0), dict(lr=0), dict(n_classes=1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(selection={"eps_conf": 0.9})
    assert cfg.selection.eps_conf == 0.9
    assert cfg.to_json()["selection"]["eps_conf"] == 0.9


def test_batch_mean_prediction():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[0.5, 0.5], [0.5, 0.5]])
    np.testing.assert_allclose(batch_mean_prediction(a, b), [0.5, 0.5])
