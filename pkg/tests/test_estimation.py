import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from ltgcd.density import AFFINITY_ONLY, compute_density, find_peaks, nmds
from ltgcd.estimation import (
    EstimationConfig,
    assign_to_peaks,
    brent_minimize,
    class_bounds,
    estimate_k,
    labelled_objective,
    search_max,
)
from ltgcd.knn import build_knn
from ltgcd.store import LabelInfo, generate_synthetic, split_labelled

from .oracles import brute_clustering_acc


def _peaks(emb, lam=0.08):
    g = build_knn(emb, 30)
    d = compute_density(g.truncate(10), mode=AFFINITY_ONLY)
    raw = find_peaks(d, g.truncate(10))
    return nmds(zip(raw, d.densities[raw]), k_s=30, lambda_nmds=lam, graph=g)


def test_class_bounds_examples():
    assert class_bounds(range(40), 5) == (5, 40)
    assert class_bounds(range(8), 10) == (10, 10)
    assert class_bounds([], 0) == (1, 1)


def test_upper_bound_covers_true_classes(lt_split):
    emb, info = lt_split
    assert class_bounds(_peaks(emb, 0.6), info.k_labelled)[1] >= 20


def test_assign_examples(four_clusters):
    emb, info = four_clusters
    peaks = _peaks(emb)
    assert np.all(assign_to_peaks(emb, peaks.peak_ids, 1) == 0)
    a = assign_to_peaks(emb, peaks.peak_ids, 4)
    assert np.array_equal(a[peaks.peak_ids[:4]], np.arange(4))
    from ltgcd.evaluation import clustering_acc

    assert clustering_acc(a, info.true_labels)[0] == 1.0
    with pytest.raises(ValueError):
        assign_to_peaks(emb, peaks.peak_ids, 0)
    with pytest.raises(ValueError):
        assign_to_peaks(emb, peaks.peak_ids, len(peaks) + 1)


def test_assign_tie_goes_to_lower_index():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [np.sqrt(0.5), np.sqrt(0.5)]])
    assert assign_to_peaks(x, [0, 1], 2).tolist() == [0, 1, 0]


def test_labelled_objective_examples(rng):
    labels = np.array([0, 0, 1, 1, 2, 2, -1])
    info = LabelInfo(labels)
    assert labelled_objective(np.array([5, 5, 3, 3, 4, 4, 0]), info) == 1.0
    assert labelled_objective(np.zeros(7, dtype=int), info) == pytest.approx(1 / 3)
    for _ in range(10):
        y = rng.integers(0, 6, 25)
        a = rng.integers(0, 6, 25)
        assert labelled_objective(a, LabelInfo(y)) == pytest.approx(brute_clustering_acc(a.tolist(), y.tolist()))


def test_degenerate_interval_single_probe():
    emb, full = generate_synthetic(10, 16, 1, 30, seed=0, intra_spread=0.05)
    info = split_labelled(full, 1.0, 0.5)
    r = estimate_k(emb, info)
    assert (r.lower, r.upper, r.k_hat) == (10, 10, 10)
    assert len(r.probe_history) == 1 and r.search == "degenerate"


def test_fewer_peaks_than_labelled_classes():
    emb, _ = generate_synthetic(3, 16, 1, 30, seed=0, intra_spread=0.05)
    # more labelled ids than clusters
    labels = np.arange(emb.n) % 6
    r = estimate_k(emb, LabelInfo(labels))
    assert r.k_hat == r.lower == r.upper == 6


def test_estimate_long_tailed(lt_split):
    emb, info = lt_split
    r = estimate_k(emb, info)
    assert 18 <= r.k_hat <= 22
    assert r.lower <= r.k_hat <= r.upper
    ks = [k for k, _ in r.probe_history]
    assert len(ks) == len(set(ks))
    best = max(acc for _, acc in r.probe_history)
    assert dict(r.probe_history)[r.k_hat] == best
    assert r.assignments.max() < r.k_hat
    assert set(r.timing) == {"knn", "peaks", "probes"}


def test_estimate_uniform():
    emb, full = generate_synthetic(10, 32, 1, 200, seed=0, intra_spread=0.08)
    r = estimate_k(emb, split_labelled(full, 0.5, 0.5, 0))
    assert 9 <= r.k_hat <= 11


def test_estimate_invariant_to_label_permutation(lt_split):
    emb, info = lt_split
    perm = np.random.default_rng(3).permutation(10) + 30
    relabelled = LabelInfo(np.where(info.labels >= 0, perm[np.maximum(info.labels, 0)], -1))
    a, b = estimate_k(emb, info), estimate_k(emb, relabelled)
    assert a.k_hat == b.k_hat and a.probe_history == b.probe_history


def test_estimate_with_probabilities(lt_split, trained):
    from ltgcd.classifier import predict

    emb, info = lt_split
    probs = predict(emb.data, trained.prototypes, trained.prototypes.tau_t)
    r = estimate_k(emb, info, probs)
    assert r.lower <= r.k_hat <= r.upper


def test_config_validation():
    for bad in (dict(k=0), dict(lambda_nmds=0), dict(brent_tol=0), dict(exhaustive_cutoff=0), dict(density_mode="x")):
        with pytest.raises(ValueError):
            EstimationConfig(**bad)


@pytest.mark.parametrize("f, lo, hi", [
    (lambda x: (x - 1.3) ** 2, -4.0, 5.0),
    (lambda x: np.cosh(x - 0.4) + 0.1 * x, -3.0, 3.0),
    (lambda x: abs(x - 2.0) ** 1.5 + x * 0.01, 0.0, 10.0),
    (lambda x: -np.sin(x), 0.0, 3.0),
])
def test_brent_matches_scipy(f, lo, hi):
    ours = brent_minimize(f, lo, hi, xtol=1e-8)
    ref = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-8}).x
    assert ours == pytest.approx(ref, abs=1e-5)


def test_brent_boundary_minimum():
    assert brent_minimize(lambda x: x, 2.0, 7.0, xtol=1e-6) == pytest.approx(2.0, abs=1e-5)
    with pytest.raises(ValueError):
        brent_minimize(lambda x: x, 1.0, 1.0)


def test_search_brent_and_exhaustive_agree_on_unimodal():
    for peak in (3, 17, 42, 88, 120):
        f = lambda k, p=peak: -abs(k - p) / 200 + 0.9  # noqa: E731
        brent = search_max(f, 1, 130, exhaustive_cutoff=50)
        full = search_max(f, 1, 130, exhaustive_cutoff=1000)
        assert brent[2] == "brent" and full[2] == "exhaustive"
        assert brent[0] == full[0] == peak
        assert len(brent[1]) < len(full[1])


def test_search_memoizes():
    calls = []

    def f(k):
        calls.append(k)
        return -((k - 33) ** 2)

    best, history, _ = search_max(f, 1, 200)
    assert best == 33
    assert len(calls) == len(set(calls)) == len(history)


def test_search_ties_prefer_larger_k():
    best, history, _ = search_max(lambda k: min(k, 7) / 7, 2, 12)
    assert best == 12
    assert search_max(lambda k: 1.0, 4, 4)[1] == [(4, 1.0)]
    with pytest.raises(ValueError):
        search_max(lambda k: 0.0, 5, 4)
