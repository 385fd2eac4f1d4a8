import math

import numpy as np
import pytest

from doublegen.autoreg import AutoregBackend, CrossEntropyLoss, NextTokenModel, ce_losses, exact_pmf
from doublegen.constants import Stream
from doublegen.core import Dataset, FoldedDataset, RngStream, partition_folds
from doublegen.exceptions import DataError, NumericalError
from doublegen.flow import FlowBackend
from doublegen.metrics import kl_categorical
from doublegen.nuisance import (
    ConstantInversePropensity,
    KnnOutcomeSampler,
    NuisancePair,
    OracleOutcomeSampler,
    OraclePropensity,
    fit_outcome_sampler,
    fit_propensity,
    fit_subset_outcome_sampler,
)
from doublegen.risk import (
    Method,
    RiskObjective,
    RiskSpec,
    doublegen_risk,
    generalization_error,
    sample_gradient_term,
)


class SquaredLoss:
    """(y - theta)^2 for a scalar theta; deterministic, so rng is unused."""

    def losses(self, theta, outcomes, rng=None):
        return (np.asarray(outcomes, dtype=float)[:, 0] - theta) ** 2

    def weighted_gradient(self, theta, outcomes, weights, rng=None):
        return [np.array(np.sum(weights * 2.0 * (theta - np.asarray(outcomes, dtype=float)[:, 0])))]


class NanLoss(SquaredLoss):
    def losses(self, theta, outcomes, rng=None):
        return np.full(len(outcomes), np.nan)


def _point_sampler(value: float) -> KnnOutcomeSampler:
    return KnnOutcomeSampler(x=np.zeros((1, 1)), y=np.array([[value]]), index=np.arange(1), k=1)


@pytest.fixture
def two_points():
    """A treated row in fold 1 and an untreated row in fold 2 with deterministic nuisances.

    Fold 1 is served by pair 1 (alpha 2, psi 2); fold 2 by pair 0 (alpha 3, psi 3).
    """
    folded = FoldedDataset(
        fold1=Dataset(x=np.zeros((1, 1)), a=np.ones(1), y=np.array([[1.0]])),
        fold2=Dataset(x=np.zeros((1, 1)), a=np.zeros(1), y=np.array([[5.0]]), index=np.array([1])),
    )
    nuisances = (
        NuisancePair(ConstantInversePropensity(3.0), _point_sampler(3.0)),
        NuisancePair(ConstantInversePropensity(2.0), _point_sampler(2.0)),
    )
    return folded, nuisances


@pytest.mark.parametrize(
    "method, expected",
    [
        # (2 * (1 - 4) + 4 + 9) / 2
        (Method.DOUBLEGEN, 3.5),
        (Method.PLUGIN, 6.5),
        (Method.IPW, 1.0),
        (Method.NAIVE, 1.0),
    ],
)
def test_two_point_risks(two_points, method, expected):
    folded, nuisances = two_points

    value = doublegen_risk(0.0, folded, nuisances, SquaredLoss(), RiskSpec(method=method, mc_u=3), RngStream(0))

    assert value == pytest.approx(expected)


def test_two_point_oracle_risk(two_points):
    folded, _ = two_points
    spec = RiskSpec(method=Method.ORACLE)
    counterfactual = np.array([[1.0], [3.0]])

    value = doublegen_risk(0.0, folded, None, SquaredLoss(), spec, RngStream(0), counterfactual=counterfactual)

    assert value == pytest.approx(5.0)


def test_two_point_full_gradient(two_points):
    folded, nuisances = two_points
    objective = RiskObjective(folded=folded, loss=SquaredLoss(), spec=RiskSpec(mc_u=4), nuisances=nuisances)

    value, grads = objective.value_and_gradient(0.0, RngStream(0))

    assert value == pytest.approx(3.5)
    assert float(grads[0]) == pytest.approx(-3.0)


def test_sampled_gradients_are_unbiased(two_points):
    folded, nuisances = two_points
    objective = RiskObjective(folded=folded, loss=SquaredLoss(), spec=RiskSpec(mc_u=4), nuisances=nuisances)

    estimate = float(objective.sample_gradient(0.0, RngStream(1), batch=10000)[0])

    assert estimate == pytest.approx(-3.0, abs=0.2)
    single = sample_gradient_term(0.0, folded, nuisances, SquaredLoss(), RiskSpec(), RngStream(2))
    # one term is either the treated row (0) or the untreated row (-6)
    assert float(single[0]) in (pytest.approx(0.0), pytest.approx(-6.0))


def test_ablations_are_exact_degenerations(token_folded):
    pairs = tuple(
        NuisancePair(fit_propensity(fold, 1), fit_outcome_sampler(fold, 1, 5)) for fold in token_folded.folds
    )
    theta = NextTokenModel(k=3, d=3, logits=tuple(RngStream(9).normal((3**j, 3)) for j in range(3)))
    loss = CrossEntropyLoss()

    def objective(method: Method) -> RiskObjective:
        return RiskObjective(folded=token_folded, loss=loss, spec=RiskSpec(method=method, mc_u=4), nuisances=pairs)

    terms = objective(Method.DOUBLEGEN).terms(theta, RngStream(3))

    assert objective(Method.PLUGIN).value(theta, RngStream(3)) == float(np.mean(terms.imputed.mean(axis=1)))
    assert objective(Method.IPW).value(theta, RngStream(3)) == float(
        np.mean(terms.treated * terms.alpha * terms.observed)
    )
    assert terms.imputed.shape == (token_folded.n, 4)


def test_unit_weights_turn_ipw_into_scaled_naive(token_folded):
    pairs = tuple(
        NuisancePair(ConstantInversePropensity(1.0), fit_outcome_sampler(fold, 1, 5)) for fold in token_folded.folds
    )
    theta = NextTokenModel.uniform(3, 3)
    loss = CrossEntropyLoss()
    combined = token_folded.combined()
    share = np.mean(combined.a == 1)

    ipw = doublegen_risk(theta, token_folded, pairs, loss, RiskSpec(method=Method.IPW), RngStream(0))
    naive = doublegen_risk(theta, token_folded, None, loss, RiskSpec(method=Method.NAIVE), RngStream(0))

    assert ipw == pytest.approx(share * naive, rel=1e-12)


def test_nuisance_methods_require_nuisances(token_folded):
    with pytest.raises(DataError, match="needs nuisances for both folds"):
        RiskObjective(folded=token_folded, loss=CrossEntropyLoss(), spec=RiskSpec(method=Method.PLUGIN))


def test_oracle_requires_counterfactual_sample(token_folded):
    with pytest.raises(DataError, match="needs a counterfactual sample"):
        RiskObjective(folded=token_folded, loss=CrossEntropyLoss(), spec=RiskSpec(method=Method.ORACLE))


def test_non_finite_losses_are_reported(two_points):
    folded, nuisances = two_points

    with pytest.raises(NumericalError, match="non-finite loss"):
        doublegen_risk(0.0, folded, nuisances, NanLoss(), RiskSpec(), RngStream(0))


def test_risk_spec_needs_draws():
    with pytest.raises(DataError, match="mc_u"):
        RiskSpec(mc_u=0)


def test_cross_fitting_uses_the_other_folds_nuisances(two_points):
    folded, (pair0, pair1) = two_points

    swapped = doublegen_risk(0.0, folded, (pair1, pair0), SquaredLoss(), RiskSpec(mc_u=2), RngStream(0))

    # fold 1 now sees alpha 3 and psi 3: (3 * (1 - 9) + 9 + 4) / 2
    assert swapped == pytest.approx(-5.5)


@pytest.mark.parametrize("seed", range(20))
def test_token_generalization_error_is_a_kl_divergence(token_dgp, seed):
    theta = NextTokenModel(k=3, d=3, logits=tuple(RngStream(seed, 4).normal((3**j, 3)) for j in range(3)))
    backend = AutoregBackend(k=3, d=3)

    law = token_dgp.counterfactual_pmf()
    entropy = -sum(p * math.log(p) for p in law.values() if p > 0)

    gap = generalization_error(theta, backend, token_dgp, 0, RngStream(0))

    kl = kl_categorical(law, exact_pmf(theta))
    assert gap == pytest.approx(kl, abs=1e-10)
    assert _true_risk(token_dgp, theta) - entropy == pytest.approx(kl, abs=1e-10)
    assert gap > 0.0


def test_token_generalization_error_of_the_reference_is_zero(token_dgp):
    backend = AutoregBackend(k=3, d=3)

    gap = generalization_error(backend.reference(token_dgp), backend, token_dgp, 0, RngStream(0))

    assert gap == pytest.approx(0.0, abs=1e-12)


def test_real_generalization_error_of_the_reference_is_zero(gauss_dgp):
    backend = FlowBackend(dim=1)

    gap = generalization_error(backend.reference(gauss_dgp), backend, gauss_dgp, 50, RngStream(0))

    assert gap == 0.0


def _true_risk(token_dgp, theta) -> float:
    law = token_dgp.counterfactual_pmf()
    sequences = np.array(list(law), dtype=np.int64)
    return float(np.array(list(law.values())) @ ce_losses(theta, sequences))


@pytest.mark.slow
def test_doublegen_is_doubly_robust(token_dgp):
    data = token_dgp.sample_observational(4000, RngStream(0))
    folded = partition_folds(data, RngStream(1))
    theta = NextTokenModel.uniform(3, 3)
    loss = CrossEntropyLoss()
    spec = RiskSpec(mc_u=16)
    truth = _true_risk(token_dgp, theta)
    oracle_propensity = OraclePropensity(token_dgp)
    oracle_outcome = OracleOutcomeSampler(token_dgp)

    wrong_outcome = tuple(
        NuisancePair(oracle_propensity, fit_subset_outcome_sampler(fold, 1, 20, feature=0, threshold=0.5))
        for fold in folded.folds
    )
    wrong_propensity = (NuisancePair(ConstantInversePropensity(1.7), oracle_outcome),) * 2

    naive = doublegen_risk(theta, folded, None, loss, RiskSpec(method=Method.NAIVE), RngStream(2))
    assert abs(naive - truth) > 0.2
    for pairs in (wrong_outcome, wrong_propensity):
        assert doublegen_risk(theta, folded, pairs, loss, spec, RngStream(2)) == pytest.approx(truth, abs=0.1)
    plugin_wrong = doublegen_risk(theta, folded, wrong_outcome, loss, RiskSpec(Method.PLUGIN, 16), RngStream(2))
    assert abs(plugin_wrong - truth) > 0.2
    assert math.isfinite(truth)


def _gauss_replications(gauss_dgp, loss, theta, pairs_for, replications=20, n=2000):
    """Per-seed differences between the doubly robust risk and the risk on a true counterfactual sample."""
    diffs = []
    for seed in range(replications):
        data = gauss_dgp.sample_observational(n, RngStream(seed, Stream.DATA))
        folded = partition_folds(data, RngStream(seed, Stream.FOLDS))
        counterfactual = gauss_dgp.sample_counterfactual(n, RngStream(seed, Stream.COUNTERFACTUAL))
        robust = doublegen_risk(theta, folded, pairs_for(folded), loss, RiskSpec(mc_u=8), RngStream(seed, 1))
        oracle = doublegen_risk(
            theta, folded, None, loss, RiskSpec(Method.ORACLE), RngStream(seed, 2), counterfactual=counterfactual
        )
        diffs.append(robust - oracle)
    diffs = np.array(diffs)
    return diffs.mean(), diffs.std(ddof=1) / math.sqrt(len(diffs))


def _subset_outcome(propensity):
    def pairs_for(folded):
        return tuple(
            NuisancePair(propensity, fit_subset_outcome_sampler(fold, 1, 20, feature=0, threshold=0.5))
            for fold in folded.folds
        )

    return pairs_for


def _unit_weights(pair):
    def pairs_for(folded):
        return pair, pair

    return pairs_for


@pytest.mark.slow
@pytest.mark.parametrize("loss_name", ["squared", "flow"])
@pytest.mark.parametrize("wrong", ["outcome", "propensity"])
def test_doublegen_matches_the_oracle_risk_with_one_wrong_nuisance(gauss_dgp, loss_name, wrong):
    if loss_name == "squared":
        loss, theta = SquaredLoss(), 0.0
    else:
        backend = FlowBackend(dim=1)
        loss, theta = backend.loss, backend.reference(gauss_dgp)
    if wrong == "outcome":
        pairs_for = _subset_outcome(OraclePropensity(gauss_dgp))
    else:
        pairs_for = _unit_weights(NuisancePair(ConstantInversePropensity(1.0), OracleOutcomeSampler(gauss_dgp)))

    mean, se = _gauss_replications(gauss_dgp, loss, theta, pairs_for)

    assert abs(mean) <= 3 * se


@pytest.mark.slow
def test_doublegen_is_biased_when_both_nuisances_are_wrong(gauss_dgp):
    pairs_for = _subset_outcome(ConstantInversePropensity(1.0))

    mean, se = _gauss_replications(gauss_dgp, SquaredLoss(), 0.0, pairs_for)

    # the subset sampler overstates E[Y^2] below the threshold and unit weights under-correct it
    assert mean > 3 * se
    assert mean > 0.3
