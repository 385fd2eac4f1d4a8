"""Cross-fitted risk estimators: oracle, naive, plug-in, IPW and the doubly robust AIPW risk."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Protocol

import numpy as np

from doublegen.constants import A_STAR_DEFAULT, MC_U_TRAIN
from doublegen.core import FoldedDataset, RngStream
from doublegen.exceptions import DataError, NumericalError
from doublegen.nn import Params
from doublegen.nuisance import BoundSampler, NuisancePair

if TYPE_CHECKING:
    from doublegen.synth import Dgp

logger = logging.getLogger("doublegen.risk")


class Method(str, Enum):
    ORACLE = "oracle"
    NAIVE = "naive"
    PLUGIN = "plugin"
    IPW = "ipw"
    DOUBLEGEN = "doublegen"

    @property
    def uses_nuisances(self) -> bool:
        return self in (Method.PLUGIN, Method.IPW, Method.DOUBLEGEN)


@dataclass(frozen=True)
class RiskSpec:
    method: Method = Method.DOUBLEGEN
    mc_u: int = MC_U_TRAIN
    a_star: int = A_STAR_DEFAULT

    def __post_init__(self) -> None:
        if self.mc_u < 1:
            raise DataError("mc_u must be at least 1")


class LossFn(Protocol):
    def losses(self, theta: Any, outcomes: np.ndarray, rng: RngStream | None = None) -> np.ndarray: ...

    def weighted_gradient(
        self, theta: Any, outcomes: np.ndarray, weights: np.ndarray, rng: RngStream | None = None
    ) -> Params: ...


@dataclass(frozen=True)
class RiskTerms:
    """Per-observation pieces of the cross-fitted risk, in fold-then-index order."""

    treated: np.ndarray  # 1(a = a*)
    alpha: np.ndarray  # inverse propensity from the other fold
    observed: np.ndarray  # loss at the observed outcome
    imputed: np.ndarray  # (n, mc_u) losses at psi(u | x)

    def combine(self) -> float:
        plug = self.imputed.mean(axis=1)
        weight = self.treated * self.alpha
        return float(np.mean(weight * (self.observed - plug) + plug))


def _check_finite(values: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NumericalError("non-finite loss")
    return values


@dataclass
class RiskObjective:
    """The risk of one method bound to a folded dataset and its cross-fitted nuisances.

    Nuisances fitted on fold j are only ever applied to observations of the other fold.
    """

    folded: FoldedDataset
    loss: LossFn
    spec: RiskSpec = field(default_factory=RiskSpec)
    nuisances: tuple[NuisancePair, NuisancePair] | None = None
    counterfactual: np.ndarray | None = None

    def __post_init__(self) -> None:
        method = self.spec.method
        if method is Method.ORACLE:
            if self.counterfactual is None or len(self.counterfactual) == 0:
                raise DataError("the oracle risk needs a counterfactual sample")
            self._outcomes = np.asarray(self.counterfactual)
            return
        combined = self.folded.combined()
        self._x, self._a, self._y = combined.x, combined.a, combined.y
        self._treated = (self._a == self.spec.a_star).astype(float)
        if method is Method.NAIVE:
            if not self._treated.any():
                raise DataError("no treated observations for the naive risk")
            self._outcomes = self._y[self._treated > 0]
            return
        if self.nuisances is None:
            raise DataError(f"the {method.value} risk needs nuisances for both folds")
        fold1, fold2 = self.folded.folds
        # nuisances[1] (fit on fold 2) serve fold 1, nuisances[0] serve fold 2
        self._bound: list[BoundSampler] = []
        alphas = []
        for fold, pair in ((fold1, self.nuisances[1]), (fold2, self.nuisances[0])):
            if len(fold) == 0:
                continue
            self._bound.append(pair.outcome.bind(fold.x))
            alphas.append(np.asarray(pair.propensity.evaluate(fold.x), dtype=float))
        self._sizes = [len(fold) for fold in (fold1, fold2) if len(fold)]
        self._alpha = np.concatenate(alphas)

    @property
    def size(self) -> int:
        """Number of equally weighted terms the risk averages over."""
        if self.spec.method in (Method.ORACLE, Method.NAIVE):
            return len(self._outcomes)
        return self.folded.n

    def _impute(self, u: np.ndarray, rng: RngStream) -> np.ndarray:
        """psi(u | x) for every observation, shape (n, mc, d)."""
        parts, start = [], 0
        for part, (bound, size) in enumerate(zip(self._bound, self._sizes)):
            parts.append(bound.draw(u[start : start + size], rng.child(part)))
            start += size
        return np.concatenate(parts)

    def _weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Observed-outcome and imputed-outcome coefficients of the risk, before averaging."""
        method = self.spec.method
        alpha = np.zeros_like(self._alpha) if method is Method.PLUGIN else self._alpha
        observed = self._treated * alpha
        imputed = np.zeros_like(observed) if method is Method.IPW else 1.0 - observed
        return observed, imputed

    def _draw(self, rng: RngStream) -> np.ndarray:
        """All outcomes the full-batch risk touches: observed rows, then mc_u imputed draws per row."""
        n, mc = len(self._y), self.spec.mc_u
        imputed = self._impute(rng.child(0).uniform((n, mc)), rng.child(1))
        return imputed.reshape(n * mc, -1)

    def terms(self, theta: Any, rng: RngStream) -> RiskTerms:
        """Risk pieces with the method's degeneration applied (PlugIn zeroes alpha, IPW zeroes the imputed losses).

        Both loss vectors are always computed so every method consumes the stream identically.
        """
        method = self.spec.method
        if not method.uses_nuisances:
            raise DataError(f"the {method.value} risk has no cross-fitted terms")
        flat = self._draw(rng)
        n = len(self._y)
        values = _check_finite(self.loss.losses(theta, np.concatenate([self._y, flat]), rng.child(2)))
        observed, imputed = values[:n], values[n:].reshape(n, self.spec.mc_u)
        alpha = np.zeros_like(self._alpha) if method is Method.PLUGIN else self._alpha
        if method is Method.IPW:
            imputed = np.zeros_like(imputed)
        return RiskTerms(treated=self._treated, alpha=alpha, observed=observed, imputed=imputed)

    def value(self, theta: Any, rng: RngStream) -> float:
        if not self.spec.method.uses_nuisances:
            return float(np.mean(_check_finite(self.loss.losses(theta, self._outcomes, rng.child(2)))))
        return self.terms(theta, rng).combine()

    def value_and_gradient(self, theta: Any, rng: RngStream) -> tuple[float, Params]:
        """Full-batch risk and its exact gradient for the drawn Monte Carlo grid."""
        if not self.spec.method.uses_nuisances:
            weights = np.full(len(self._outcomes), 1.0 / len(self._outcomes))
            grads = self.loss.weighted_gradient(theta, self._outcomes, weights, rng.child(2))
            return self.value(theta, rng), grads
        n, mc = len(self._y), self.spec.mc_u
        flat = self._draw(rng)
        observed, imputed = self._weights()
        weights = np.concatenate([observed / n, np.repeat(imputed / (n * mc), mc)])
        grads = self.loss.weighted_gradient(theta, np.concatenate([self._y, flat]), weights, rng.child(2))
        return self.terms(theta, rng).combine(), grads

    def term_gradient(self, theta: Any, rows: np.ndarray, u: np.ndarray, rng: RngStream) -> Params:
        """Mean gradient of the bracketed terms at observations ``rows`` (fold-then-index order) and uniforms ``u``."""
        rows = np.asarray(rows, dtype=np.int64)
        method = self.spec.method
        if not method.uses_nuisances:
            outcomes = self._outcomes[rows]
            weights = np.full(len(rows), 1.0 / len(rows))
            return self.loss.weighted_gradient(theta, outcomes, weights, rng.child(2))
        observed, imputed = self._weights()
        u = np.asarray(u, dtype=float).reshape(-1)
        draws = np.empty((len(rows), self._y.shape[1]), dtype=self._y.dtype)
        start = 0
        for part, (bound, size) in enumerate(zip(self._bound, self._sizes)):
            local = np.flatnonzero((rows >= start) & (rows < start + size))
            if len(local):
                chosen = bound.subset(rows[local] - start)
                draws[local] = chosen.draw(u[local, None], rng.child(1, part))[:, 0]
            start += size
        outcomes = np.concatenate([self._y[rows], draws])
        weights = np.concatenate([observed[rows], imputed[rows]]) / len(rows)
        return self.loss.weighted_gradient(theta, outcomes, weights, rng.child(2))

    def sample_gradient(self, theta: Any, rng: RngStream, batch: int = 1) -> Params:
        """Average of ``batch`` unbiased single-term gradients with (j, z, u) drawn at random."""
        rows = rng.child(0).integers(self.size, size=batch)
        u = rng.child(3).uniform(batch)
        return self.term_gradient(theta, rows, u, rng)


def doublegen_risk(
    theta: Any,
    folded: FoldedDataset,
    nuisances: tuple[NuisancePair, NuisancePair] | None,
    loss: LossFn,
    spec: RiskSpec,
    rng: RngStream,
    counterfactual: np.ndarray | None = None,
) -> float:
    objective = RiskObjective(folded=folded, loss=loss, spec=spec, nuisances=nuisances, counterfactual=counterfactual)
    return objective.value(theta, rng)


def sample_gradient_term(
    theta: Any,
    folded: FoldedDataset,
    nuisances: tuple[NuisancePair, NuisancePair] | None,
    loss: LossFn,
    spec: RiskSpec,
    rng: RngStream,
    counterfactual: np.ndarray | None = None,
) -> Params:
    objective = RiskObjective(folded=folded, loss=loss, spec=spec, nuisances=nuisances, counterfactual=counterfactual)
    return objective.sample_gradient(theta, rng, batch=1)


def generalization_error(theta: Any, backend: Any, dgp: Dgp, m: int, rng: RngStream) -> float:
    """Excess counterfactual risk of ``theta`` over the backend's reference hypothesis.

    Exact summation over the counterfactual pmf for token backends; otherwise a Monte Carlo
    average over ``m`` counterfactual draws with common random numbers for both hypotheses,
    which may dip below zero by Monte Carlo error.
    """
    reference = backend.reference(dgp)
    pmf = getattr(dgp, "counterfactual_pmf", None)
    if pmf is not None:
        law = {s: p for s, p in pmf().items() if p > 0}
        sequences = np.array(list(law), dtype=np.int64)
        probs = np.array(list(law.values()))
        gap = backend.loss.losses(theta, sequences) - backend.loss.losses(reference, sequences)
        return float(probs @ gap)
    if m < 1:
        raise DataError("need at least one counterfactual draw")
    outcomes = dgp.sample_counterfactual(m, rng.child(0))
    gap = backend.loss.losses(theta, outcomes, rng.child(1)) - backend.loss.losses(reference, outcomes, rng.child(1))
    return float(np.mean(_check_finite(gap)))
