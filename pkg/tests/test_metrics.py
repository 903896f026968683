import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mplab.metrics import auc, candidate_thresholds, eer_threshold, evaluate, hter, roc_curve, score
from mplab.models import Prediction

from .oracles.rates import auc_pairs, eer_by_sweep, rates, sweep


def test_score_examples():
    assert score(Prediction(np.array([[0.0, 1.0]]), np.ones((1, 1, 4, 4)))).tolist() == [1.0]
    assert score(Prediction(np.array([[1.0, 0.0]]), np.zeros((1, 1, 4, 4)))).tolist() == [0.0]
    m = np.array([0.2, 0.6, 0.4, 0.4]).reshape(1, 1, 2, 2)  # mean 0.4
    assert score(Prediction(np.array([[0.4, 0.6]]), m)) == pytest.approx([0.5], abs=1e-12)


def test_auc_examples():
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.75
    assert auc([0.5, 0.5], [1, 0]) == 0.5


def _random_set(rng, n):
    labels = np.array([1, 0] + list(rng.integers(0, 2, n - 2)))
    # a coarse grid forces plenty of ties
    scores = rng.integers(0, 8, n) / 8.0 if rng.random() < 0.5 else rng.random(n)
    return scores, labels


def test_auc_equals_pair_counting_on_20_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(20):
        scores, labels = _random_set(rng, int(rng.integers(2, 51)))
        assert auc(scores, labels) == float(auc_pairs(scores.tolist(), labels.tolist()))


def test_auc_with_random_labels_is_near_half():
    rng = np.random.default_rng(4)
    scores = rng.random(1000)
    labels = rng.permutation(np.repeat([1, 0], 500))
    assert 0.4 <= auc(scores, labels) <= 0.6


def test_perfect_separation_gives_zero_hter():
    scores, labels = [0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]
    tau = eer_threshold(scores, labels)
    assert 0.2 < tau < 0.8 and hter(scores, labels, tau) == (0.0, 0.0, 0.0)


def test_auc_monte_carlo():
    rng = np.random.default_rng(1)
    scores, labels = rng.random(40), np.repeat([1, 0], 20)
    gen, spf = scores[:20], scores[20:]
    draws = np.mean(gen[rng.integers(0, 20, 200_000)] > spf[rng.integers(0, 20, 200_000)])
    assert auc(scores, labels) == pytest.approx(draws, abs=0.01)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=30), st.randoms(use_true_random=False))
def test_auc_invariant_under_monotone_maps(values, r):
    labels = [1, 0] + [r.randint(0, 1) for _ in values[2:]]
    v = np.array(values) / 50.0  # a grid keeps every map strictly monotone in floating point
    base = auc(v, labels)
    assert auc(np.exp(3 * v), labels) == base
    assert auc(2 * v + 1, labels) == base
    assert auc(-v, labels) == pytest.approx(1 - base)


def test_hter_example():
    far, frr, h = hter([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0], 0.5)
    assert (far, frr, h) == (0.5, 0.5, 0.5)


def test_eer_rule_on_documented_example():
    scores, labels = [0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]
    tau = eer_threshold(scores, labels)
    assert tau == 0.5  # candidates 0.25, 0.5, 0.75 have gaps 0.5, 0, 0.5
    assert hter(scores, labels, tau)[2] == 0.5
    assert eer_by_sweep(scores, labels) == (0.5, 0.5)


def test_eer_matches_sweep_oracle():
    rng = np.random.default_rng(2)
    for _ in range(40):
        scores, labels = _random_set(rng, int(rng.integers(2, 51)))
        tau = eer_threshold(scores, labels)
        o_tau, o_hter = eer_by_sweep(scores.tolist(), labels.tolist())
        assert tau == o_tau
        assert hter(scores, labels, tau)[2] == float(o_hter)


def test_degenerate_all_equal_scores():
    scores, labels = [0.3] * 4, [1, 0, 1, 0]
    assert list(candidate_thresholds(scores)) == [0.3]
    assert eer_threshold(scores, labels) == 0.3
    far, frr = rates(scores, labels, 0.3)
    assert hter(scores, labels, 0.3) == (float(far), float(frr), 0.5)  # every spoof accepted
    assert auc(scores, labels) == 0.5


def test_errors():
    with pytest.raises(ValueError, match="both"):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError, match="labels"):
        auc([0.1, 0.2], [1, 2])
    with pytest.raises(ValueError):
        auc([0.1], [1, 0])


def test_roc_endpoints_and_evaluate():
    scores, labels = [0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]
    far, tpr = roc_curve(scores, labels)
    assert (far[0], tpr[0]) == (0.0, 0.0) and (far[-1], tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(far) >= 0) and np.all(np.diff(tpr) >= 0)
    rep = evaluate(scores, labels, ["a"], "b", 3)
    assert (rep.auc, rep.threshold, rep.hter, rep.test_domain) == (0.75, 0.5, 0.5, "b")
    assert rep.row()["auc"] == 0.75


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.randoms(use_true_random=False))
def test_score_lies_in_unit_interval(n, side, r):
    s1 = np.array([r.random() for _ in range(n)])
    m = np.array([r.random() for _ in range(n * side * side)]).reshape(n, 1, side, side)
    out = score(Prediction(np.stack([1 - s1, s1], axis=1), m))
    assert ((out >= 0) & (out <= 1)).all()


def test_eer_hter_is_minimal_when_far_equals_frr_is_attainable():
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(200):
        scores, labels = _random_set(rng, int(rng.integers(4, 30)))
        balanced = [r for r in sweep(scores.tolist(), labels.tolist()) if r[1] == 0]
        if not balanced:
            continue
        checked += 1
        tau = eer_threshold(scores, labels)
        assert hter(scores, labels, tau)[2] == float(min(r[4] for r in balanced))
    assert checked > 10
