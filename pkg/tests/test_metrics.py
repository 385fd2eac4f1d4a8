import math

import numpy as np
import pytest

from doublegen.core import RngStream
from doublegen.exceptions import DataError
from doublegen.metrics import (
    MetricReport,
    binned_frequencies,
    chi2_divergence,
    default_edges,
    empirical_pmf,
    kl_categorical,
    sample_metrics,
    sliced_w1,
    token_metrics,
    tv_binned,
    tv_categorical,
    wasserstein1_1d,
    weighted_reference,
)


def test_w1_of_a_shift_is_the_shift():
    a = np.arange(100, dtype=float)

    assert wasserstein1_1d(a, a + 2.0) == pytest.approx(2.0)


def test_w1_equalizes_sample_sizes():
    value = wasserstein1_1d(np.zeros(50), np.ones(80), RngStream(0))

    assert value == pytest.approx(1.0)


def test_w1_rejects_empty_samples():
    with pytest.raises(DataError, match="non-empty"):
        wasserstein1_1d(np.zeros(0), np.ones(3))


def test_sliced_w1_needs_two_dimensions():
    with pytest.raises(DataError, match="dimension >= 2"):
        sliced_w1(np.zeros((5, 1)), np.zeros((5, 1)), 4, RngStream(0))


def test_sliced_w1_detects_a_shift():
    a = RngStream(1).normal((400, 2))

    assert sliced_w1(a, a, 16, RngStream(0)) == pytest.approx(0.0)
    assert sliced_w1(a, a + np.array([3.0, 0.0]), 16, RngStream(0)) > 0.5


def test_binned_frequencies_keep_overflow_bins():
    freqs = binned_frequencies(np.array([-1.0, 0.5, 5.0]), np.array([0.0, 1.0, 2.0]))

    assert freqs.tolist() == pytest.approx([1 / 3, 1 / 3, 0.0, 1 / 3])


def test_binned_frequencies_reject_unsorted_edges():
    with pytest.raises(DataError, match="strictly increasing"):
        binned_frequencies(np.zeros(3), np.array([1.0, 0.0]))


def test_tv_binned_bounds():
    a, b = np.zeros(20), np.full(20, 10.0)
    edges = default_edges(a, b, bins=5)

    assert tv_binned(a, a, edges) == 0.0
    assert tv_binned(a, b, edges) == pytest.approx(1.0)


def test_default_edges_widen_constant_samples():
    edges = default_edges(np.ones(3), np.ones(2), bins=4)

    assert edges[0] == 0.5 and edges[-1] == 1.5


def test_tv_categorical():
    assert tv_categorical({"a": 0.5, "b": 0.5}, {"a": 1.0}) == pytest.approx(0.5)


def test_kl_categorical_values():
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])

    assert kl_categorical(p, p) == 0.0
    assert kl_categorical(p, q) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3))
    assert kl_categorical({"a": 0.5, "b": 0.5}, {"a": 1.0}) == math.inf
    assert kl_categorical({"a": 1.0, "b": 0.0}, {"a": 1.0}) == 0.0


def test_chi2_divergence_values():
    assert chi2_divergence(np.array([0.5, 0.5]), np.array([0.25, 0.75])) == pytest.approx(1 / 3)
    assert chi2_divergence({"a": 1.0}, {"a": 1.0}) == 0.0
    assert chi2_divergence({"b": 1.0}, {"a": 1.0}) == math.inf


def test_empirical_pmf():
    pmf = empirical_pmf(np.array([[2, 3, 1], [2, 3, 1], [3, 1, 1], [2, 2, 2]]))

    assert pmf == {(2, 2, 2): 0.25, (2, 3, 1): 0.5, (3, 1, 1): 0.25}


def test_weighted_reference_never_picks_zero_weight_rows():
    outcomes = np.array([[0.0], [1.0], [2.0]])

    picks = weighted_reference(outcomes, np.array([0.0, 1.0, 3.0]), 500, RngStream(0))

    assert set(picks[:, 0].tolist()) == {1.0, 2.0}
    assert np.mean(picks == 2.0) == pytest.approx(0.75, abs=0.06)


def test_weighted_reference_rejects_negative_weights():
    with pytest.raises(DataError, match="non-negative"):
        weighted_reference(np.zeros((2, 1)), np.array([1.0, -1.0]), 3, RngStream(0))


def test_metric_report_rejects_negative_and_nan_values():
    with pytest.raises(DataError, match="must be non-negative"):
        MetricReport("w1", -0.1, (1, 1))
    with pytest.raises(DataError, match="must be non-negative"):
        MetricReport("w1", math.nan, (1, 1))


def test_sample_metrics_one_and_many_dimensions():
    rng = RngStream(3)
    one = sample_metrics(rng.child(0).normal((100, 1)), rng.child(1).normal((100, 1)), RngStream(0), bins=10)
    two = sample_metrics(rng.child(0).normal((100, 2)), rng.child(1).normal((100, 2)), RngStream(0), projections=8)

    assert [r.metric for r in one] == ["w1", "tv"]
    assert one[1].config == {"bins": 10}
    assert two[0].config == {"projections": 8}
    assert all(r.sizes == (100, 100) for r in one + two)


def test_token_metrics_vanish_at_the_truth():
    truth = {(3, 1, 1): 0.5, (2, 2, 2): 0.5}
    samples = np.array([[3, 1, 1], [2, 2, 2]])

    kl, tv = token_metrics(samples, truth, truth)

    assert (kl.metric, tv.metric) == ("kl", "tv")
    assert kl.value == 0.0
    assert tv.value == pytest.approx(0.0)


def test_token_tv_without_samples_is_undefined():
    truth = {(3, 1, 1): 1.0}

    kl, tv = token_metrics(np.zeros((0, 3), dtype=np.int64), truth, truth)

    assert kl.value == 0.0
    assert math.isnan(tv.value)
