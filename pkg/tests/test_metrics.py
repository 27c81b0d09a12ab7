import numpy as np
import pytest

from oracles import auc_oracle
from oracles import eer_oracle
from oracles import f1_oracle
from retarget.core import ArgumentError
from retarget.equations import metrics


def scored(inliers, outliers):
    scores = list(inliers) + list(outliers)
    labels = [False] * len(inliers) + [True] * len(outliers)
    return scores, labels


def random_sets(count, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, 201))
        # coarse grid to force ties
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        labels[0], labels[1] = True, False
        yield scores, labels


def test_auc_examples():
    assert metrics.auc(*scored([0.1, 0.2], [0.8, 0.9])) == 1.0
    assert metrics.auc(*scored([0.8, 0.9], [0.1, 0.2])) == 0.0
    assert metrics.auc(*scored([0.1, 0.4], [0.3, 0.8])) == 0.75
    assert metrics.auc(*scored([0.5, 0.5], [0.5])) == 0.5


def test_eer_examples():
    assert metrics.eer(*scored([0.1, 0.2], [0.8, 0.9]))[0] == 0.0
    assert metrics.eer(*scored([0.1, 0.9], [0.2, 0.8]))[0] == 0.5
    assert metrics.eer(*scored([0.3, 0.3, 0.3], [0.3]))[0] == 0.5


def test_f1_examples():
    assert metrics.f1_best(*scored([0.1, 0.2], [0.8, 0.9]))[0] == 1.0
    f1, threshold = metrics.f1_best(*scored([0.1, 0.8], [0.7, 0.9]))
    assert f1 == pytest.approx(0.8)
    assert 0.1 < threshold <= 0.7
    # all-equal scores flag everything: F1 = 2p / (p + 1)
    f1, _ = metrics.f1_best(*scored([0.4] * 3, [0.4]))
    p = 0.25
    assert f1 == pytest.approx(2 * p / (p + 1))


def test_single_class_rejected():
    for fn in (metrics.auc, metrics.eer, metrics.f1_best):
        with pytest.raises(ArgumentError):
            fn([0.1, 0.2], [False, False])
        with pytest.raises(ArgumentError):
            fn([0.1, 0.2], [True, True])


def test_metrics_match_oracles():
    for scores, labels in random_sets(1000):
        assert abs(metrics.auc(scores, labels) - auc_oracle(scores, labels)) <= 1e-9
        assert abs(metrics.eer(scores, labels)[0] - eer_oracle(scores, labels)) <= 1e-9
        f1, threshold = metrics.f1_best(scores, labels)
        expected_f1, expected_threshold = f1_oracle(scores, labels)
        assert abs(f1 - expected_f1) <= 1e-9
        assert threshold == expected_threshold


def test_auc_invariant_under_increasing_maps():
    maps = [np.exp, lambda s: s ** 3, lambda s: np.log1p(s) * 7 - 2, lambda s: 1 / (1 + np.exp(-40 * (s - 0.5)))]
    for scores, labels in random_sets(50, seed=2):
        base = metrics.auc(scores, labels)
        for f in maps:
            assert metrics.auc(f(scores), labels) == base


def test_histogram_counts_everything():
    counts, edges = metrics.histogram([0.0, 0.5, 1.0, 0.99], bins=4)
    assert counts.tolist() == [1, 0, 1, 2]
    assert edges[0] == 0.0 and edges[-1] == 1.0
