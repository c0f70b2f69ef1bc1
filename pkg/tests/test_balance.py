import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infarctseg.balance import class_frequencies, median_frequency_weights, weighted_cross_entropy
from infarctseg.errors import DataError, DomainError
from infarctseg.gradcheck import check_function

# class-indexed (background, blood, muscle, scar)
REFERENCE_WEIGHTS = np.array([0.0163, 1.3923, 0.7802, 13.7678])


def inverted_frequencies(weights):
    """Frequencies implied by a weight vector: F_i proportional to 1 / W_i."""
    inv = 1.0 / np.asarray(weights)
    return inv / inv.sum()


def median_weights_by_sorting(freq):
    """Independent oracle: explicit sort, explicit middle pair."""
    f = list(freq)
    s = sorted(f)
    n = len(s)
    med = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    return [med / v for v in f]


def test_equal_counts():
    lab = np.repeat(np.arange(4), 4).reshape(4, 4)
    fv = class_frequencies([lab])
    np.testing.assert_array_equal(fv.frequencies, [0.25] * 4)
    np.testing.assert_array_equal(median_frequency_weights(fv), [1.0] * 4)


def test_hand_counts():
    lab = np.array([[0, 1, 2, 2, 3, 3, 3, 3]])
    fv = class_frequencies([lab])
    np.testing.assert_array_equal(fv.counts, [1, 1, 2, 4])
    np.testing.assert_array_equal(fv.frequencies, [0.125, 0.125, 0.25, 0.5])
    np.testing.assert_array_equal(median_frequency_weights(fv), [1.5, 1.5, 0.75, 0.375])


def test_counts_pool_over_collection():
    a = np.zeros((2, 2), np.uint8)
    b = np.full((1, 4), 3, np.uint8)
    fv = class_frequencies([a, b])
    np.testing.assert_array_equal(fv.counts, [4, 0, 0, 4])


def test_reference_weights_from_inverted_frequencies():
    f = inverted_frequencies(REFERENCE_WEIGHTS)
    w = median_frequency_weights(f)
    assert np.max(np.abs(w - REFERENCE_WEIGHTS)) < 1e-3
    np.testing.assert_allclose(w, median_weights_by_sorting(f), rtol=1e-15)


def test_rounded_frequency_vector_is_close_but_coarser():
    # four-significant-figure frequencies quoted alongside the weights
    w = median_frequency_weights(np.array([0.9674, 0.011325, 0.02021, 0.001145]))
    np.testing.assert_allclose(w[:3], REFERENCE_WEIGHTS[:3], atol=1e-3)
    assert abs(w[3] - REFERENCE_WEIGHTS[3]) < 5e-3


def test_odd_count_median_class_weight_is_one():
    f = np.array([0.5, 0.2, 0.3])
    w = median_frequency_weights(f)
    assert w[2] == 1.0


def test_absent_class_gets_max_weight(caplog):
    with caplog.at_level(logging.WARNING):
        w = median_frequency_weights(np.array([0.7, 0.2, 0.1, 0.0]))
    assert w[3] == w[:3].max()
    assert "absent" in caplog.text


def test_errors():
    with pytest.raises(DomainError):
        class_frequencies([])
    with pytest.raises(DataError):
        class_frequencies([np.array([[4]])])
    with pytest.raises(DomainError):
        median_frequency_weights(np.zeros(4))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=200))
def test_weights_match_sorting_oracle(values):
    lab = np.array(values, dtype=np.uint8)[None]
    fv = class_frequencies([lab])
    counts = [values.count(c) for c in range(4)]
    assert fv.counts.tolist() == counts
    assert math.isclose(fv.frequencies.sum(), 1.0, abs_tol=1e-12)
    if all(counts):
        np.testing.assert_allclose(median_frequency_weights(fv), median_weights_by_sorting(fv.frequencies),
                                   rtol=1e-14)


# loss ------------------------------------------------------------------------


def test_uniform_scores_give_ln4():
    loss, _ = weighted_cross_entropy(np.zeros((1, 4, 3, 3)), np.zeros((1, 3, 3), int), np.ones(4))
    assert math.isclose(loss, math.log(4), rel_tol=1e-15)


def test_saturated_scores_give_zero():
    truth = np.random.default_rng(0).integers(0, 4, (2, 4, 4))
    scores = np.where(np.arange(4)[None, :, None, None] == truth[:, None], 100.0, -100.0)
    loss, grad = weighted_cross_entropy(scores, truth, np.array([0.1, 1, 2, 3.0]))
    assert loss < 1e-80 and np.abs(grad).max() < 1e-80


def test_single_class_weight_cancels():
    rng = np.random.default_rng(1)
    s = rng.standard_normal((1, 4, 4, 4))
    t = np.full((1, 4, 4), 2)
    w = np.array([1.0, 2.0, 3.0, 4.0])
    w2 = w.copy()
    w2[2] *= 2
    assert weighted_cross_entropy(s, t, w)[0] == weighted_cross_entropy(s, t, w2)[0]


def test_weight_scale_invariance():
    rng = np.random.default_rng(2)
    s = rng.standard_normal((2, 4, 5, 5))
    t = rng.integers(0, 4, (2, 5, 5))
    w = rng.uniform(0.1, 3, 4)
    l1, g1 = weighted_cross_entropy(s, t, w)
    l2, g2 = weighted_cross_entropy(s, t, 8.0 * w)
    assert math.isclose(l1, l2, rel_tol=1e-14)
    np.testing.assert_allclose(g1, g2, rtol=1e-13, atol=1e-18)


def test_loss_matches_explicit_loop():
    rng = np.random.default_rng(3)
    s = rng.standard_normal((1, 4, 3, 3))
    t = rng.integers(0, 4, (1, 3, 3))
    w = np.array([0.2, 1.0, 1.5, 7.0])
    num = den = 0.0
    for y in range(3):
        for x in range(3):
            col = s[0, :, y, x]
            p = math.exp(col[t[0, y, x]]) / sum(math.exp(v) for v in col)
            num += w[t[0, y, x]] * -math.log(p)
            den += w[t[0, y, x]]
    assert math.isclose(weighted_cross_entropy(s, t, w)[0], num / den, rel_tol=1e-13)


def test_loss_gradient():
    rng = np.random.default_rng(4)
    s = rng.standard_normal((1, 4, 4, 4))
    t = rng.integers(0, 4, (1, 4, 4))
    w = np.array([0.05, 1.4, 0.8, 13.0])
    _, g = weighted_cross_entropy(s, t, w)
    err = check_function(lambda scores: weighted_cross_entropy(scores, t, w)[0], {"scores": s}, {"scores": g})
    assert err < 1e-5


def test_bad_labels():
    with pytest.raises(DataError):
        weighted_cross_entropy(np.zeros((1, 4, 2, 2)), np.full((1, 2, 2), 4), np.ones(4))
    with pytest.raises(DataError):
        weighted_cross_entropy(np.zeros((1, 4, 2, 2)), np.zeros((1, 3, 2)), np.ones(4))
