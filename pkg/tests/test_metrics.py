import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hyperens import metrics


def two_class(p0):
    p0 = np.atleast_1d(p0)
    return np.stack([p0, 1.0 - p0], axis=1)


def test_basic_metrics_one_hot_and_uniform():
    labels = np.array([2, 0, 1])
    assert metrics.basic_metrics(np.eye(3)[labels], labels) == pytest.approx((0.0, 1.0, 0.0), abs=1e-12)
    labels = np.array([0, 3, 0, 9, 5])
    nll, acc, brier = metrics.basic_metrics(np.full((5, 10), 0.1), labels)
    assert nll == pytest.approx(np.log(10))
    assert acc == pytest.approx(0.4)
    assert brier == pytest.approx(0.9)


def test_brier_two_class():
    _, _, brier = metrics.basic_metrics(np.array([[0.7, 0.3]]), [0])
    assert brier == pytest.approx(0.18)


def test_ece_examples():
    probs = np.array([[0.95, 0.05], [0.55, 0.45]])
    e, bins = metrics.ece(probs, [0, 1], 15)
    assert e == pytest.approx(0.300)
    assert sum(b.count for b in bins) == 2 and len(bins) == 15
    # calibrated by construction: confidence 0.5 on both, one right and one wrong
    assert metrics.ece(np.full((2, 2), 0.5), [0, 1])[0] == pytest.approx(0.0)
    probs = two_class([0.9, 0.6, 0.8, 0.3])
    labels = np.array([0, 1, 0, 1])
    acc = np.mean(probs.argmax(1) == labels)
    assert metrics.ece(probs, labels, 1)[0] == pytest.approx(abs(acc - probs.max(1).mean()))
    with pytest.raises(ValueError):
        metrics.ece(probs, labels, 0)


def test_ece_boundary_goes_up():
    # confidence 0.6 with 5 bins sits on the 0.6 edge and belongs to bin [0.6, 0.8)
    _, bins = metrics.ece(np.array([[0.6, 0.4], [1.0, 0.0]]), [0, 0], 5)
    assert [b.count for b in bins] == [0, 0, 0, 1, 1]


def test_diversity_examples():
    a = np.array([0, 1, 0, 1])
    assert metrics.diversity(np.stack([a, a]), 0.5) == 0.0
    b = np.array([0, 1, 1, 0])
    assert metrics.diversity(np.stack([a, b]), 0.5) == pytest.approx(1.0)
    c = np.array([1, 1, 1, 1])
    perm = [metrics.diversity(np.stack(s), 0.25) for s in ([a, b, c], [c, a, b], [b, c, a])]
    assert perm[0] == pytest.approx(perm[1]) == pytest.approx(perm[2])
    assert metrics.diversity(np.stack([a, b]), 1.0) is None
    with pytest.raises(ValueError):
        metrics.diversity(a[None], 0.5)


def auroc_pairs(c_in, c_out):
    gt = (c_in[:, None] > c_out[None, :]).mean()
    eq = (c_in[:, None] == c_out[None, :]).mean()
    return gt + 0.5 * eq


def fpr95_sweep(c_in, c_out):
    # largest threshold t with TPR(t) >= 0.95, predicting positive when conf >= t
    best = None
    for t in np.unique(np.concatenate([c_in, c_out])):
        if np.mean(c_in >= t) >= 0.95:
            best = t if best is None else max(best, t)
    return np.mean(c_out >= best)


def test_ood_examples():
    in_p = two_class(np.linspace(0.8, 0.99, 20))
    out_p = two_class(np.linspace(0.5, 0.7, 10))
    mmc, auroc, fpr = metrics.ood_metrics(in_p, out_p)
    assert auroc == 1.0 and fpr == 0.0
    assert mmc == pytest.approx(0.6)
    same = two_class(np.full(8, 0.7))
    assert metrics.ood_metrics(same, same)[1] == pytest.approx(0.5)
    assert metrics.ood_metrics(in_p, np.full((4, 10), 0.1))[0] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        metrics.ood_metrics(in_p, np.zeros((0, 2)))


conf = arrays(np.float64, st.integers(1, 40), elements=st.sampled_from(np.linspace(0.5, 1.0, 11)))


@settings(max_examples=60)
@given(c_in=conf, c_out=conf)
def test_ood_matches_bruteforce(c_in, c_out):
    _, auroc, fpr = metrics.ood_metrics(two_class(c_in), two_class(c_out))
    assert auroc == pytest.approx(auroc_pairs(c_in, c_out), abs=1e-12)
    assert fpr == pytest.approx(fpr95_sweep(c_in, c_out), abs=1e-12)


@settings(max_examples=40)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 30))
def test_invariants(seed, n):
    gen = np.random.default_rng(seed)
    probs = gen.dirichlet(np.ones(4), size=n)
    labels = gen.integers(0, 4, size=n)
    perm = gen.permutation(n)
    e = metrics.ece(probs, labels)[0]
    assert 0.0 <= e <= 1.0
    assert metrics.ece(probs[perm], labels[perm])[0] == pytest.approx(e, abs=1e-12)
    # basic metrics are means, so they split over a partition
    k = n // 2
    whole = np.array(metrics.basic_metrics(probs, labels))
    if 0 < k < n:
        parts = (k * np.array(metrics.basic_metrics(probs[:k], labels[:k]))
                 + (n - k) * np.array(metrics.basic_metrics(probs[k:], labels[k:]))) / n
        np.testing.assert_allclose(parts, whole, rtol=1e-12, atol=1e-14)


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000))
def test_auroc_monotone_transform(seed):
    gen = np.random.default_rng(seed)
    c_in, c_out = gen.uniform(0.5, 1, 15), gen.uniform(0.5, 1, 12)
    base = metrics.ood_metrics(two_class(c_in), two_class(c_out))[1]
    # the map keeps values in [0.5, 1] and is strictly increasing there
    f = lambda c: 0.5 + (c - 0.5) ** 2 * 2
    assert metrics.ood_metrics(two_class(f(c_in)), two_class(f(c_out)))[1] == pytest.approx(base)


def test_rows_must_sum_to_one():
    with pytest.raises(ValueError):
        metrics.basic_metrics(np.array([[0.5, 0.6]]), [0])


def test_evaluate_report():
    gen = np.random.default_rng(0)
    members = gen.dirichlet(np.ones(3), size=(2, 10))
    labels = gen.integers(0, 3, size=10)
    out = gen.dirichlet(np.ones(3), size=(2, 6))
    r = metrics.evaluate(members, labels, out_member_probs=out)
    avg = members.mean(0)
    assert r.nll == pytest.approx(metrics.basic_metrics(avg, labels)[0])
    assert r.n == 10 and r.mmc is not None and r.diversity is not None
    d = r.to_dict()
    assert "bins" not in d and "bins" in r.to_dict(with_bins=True)
    single = metrics.evaluate(members[0], labels)
    assert single.diversity is None and single.auroc is None
