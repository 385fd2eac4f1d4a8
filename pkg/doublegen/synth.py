"""Synthetic confounded data-generating processes whose counterfactual law is known exactly."""

from __future__ import annotations

import logging
from collections.abc import Hashable
from dataclasses import dataclass, field
from functools import cached_property
from typing import Protocol

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import expit, log_softmax, ndtri
from scipy.stats import norm

from doublegen.autoreg import NextTokenModel, ancestral_sample, categorical_quantile, exact_pmf
from doublegen.config import GaussDgpConfig, TokenDgpConfig
from doublegen.constants import A_STAR_DEFAULT, CLIP_DEFAULT, CONTROL_LABEL, PAD_TOKEN
from doublegen.core import Dataset, OutcomeKind, RngStream
from doublegen.exceptions import DataError
from doublegen.nuisance import NuisancePair, OracleOutcomeSampler, OraclePropensity

logger = logging.getLogger("doublegen.synth")

# keeps ndtri finite at u = 0
_U_FLOOR = 1e-12


def _control_label(a_star: int) -> int:
    return CONTROL_LABEL if a_star != CONTROL_LABEL else CONTROL_LABEL + 1


class Dgp(Protocol):
    a_star: int
    outcome_kind: OutcomeKind

    @property
    def n_features(self) -> int: ...

    @property
    def dim(self) -> int: ...

    def propensity(self, x: np.ndarray) -> np.ndarray: ...

    def conditional_quantile(self, u: np.ndarray, x: np.ndarray, rng: RngStream | None = None) -> np.ndarray: ...

    def conditional_law(self, x: np.ndarray, edges: np.ndarray | None = None) -> dict[Hashable, float]: ...

    def sample_observational(self, n: int, rng: RngStream) -> Dataset: ...

    def sample_counterfactual(self, n: int, rng: RngStream) -> np.ndarray: ...


@dataclass(frozen=True)
class GaussianMixture:
    """Equal-variance isotropic Gaussian mixture: ``sum_i weights[i] N(means[i], sd^2 I)``."""

    weights: np.ndarray
    means: np.ndarray
    sd: float

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=float)
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        if len(weights) != len(means) or np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
            raise DataError("mixture weights must be a probability vector with one entry per component")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def variance(self) -> np.ndarray:
        centered = self.means - self.mean()
        return self.sd**2 + self.weights @ centered**2

    def responsibilities(self, y: np.ndarray, centers: np.ndarray, variance: np.ndarray | float) -> np.ndarray:
        """Posterior component weights for points ``y`` (B, d) given per-point centers (B, K, d) and variances."""
        variance = np.reshape(variance, (-1, 1))
        sq = np.sum((y[:, None, :] - centers) ** 2, axis=2)
        with np.errstate(divide="ignore"):
            logits = np.log(self.weights)[None, :] - sq / (2 * variance)
        return np.exp(log_softmax(logits, axis=1))

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        components = rng.generator.choice(len(self.weights), size=n, p=self.weights)
        return self.means[components] + self.sd * rng.normal((n, self.dim))

    def binned_law(self, edges: np.ndarray) -> dict[Hashable, float]:
        """Law of the first coordinate over ``edges`` with an overflow bin at each end."""
        cdf = norm.cdf((np.asarray(edges)[None, :] - self.means[:, :1]) / self.sd)
        cdf = np.hstack([np.zeros((len(cdf), 1)), cdf, np.ones((len(cdf), 1))])
        probs = self.weights @ np.diff(cdf, axis=1)
        return {b: float(p) for b, p in enumerate(probs)}


# ---------------------------------------------------------------------------
# Real-valued outcomes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussConfounded:
    config: GaussDgpConfig = field(default_factory=GaussDgpConfig)
    a_star: int = A_STAR_DEFAULT
    outcome_kind: OutcomeKind = OutcomeKind.REAL

    @property
    def n_features(self) -> int:
        return self.config.p

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def k(self) -> None:
        return None

    def propensity(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        c = self.config
        score = c.propensity_intercept + x @ np.asarray(c.propensity_slope)
        return np.clip(expit(score), c.propensity_floor, 1.0 - c.propensity_floor)

    def outcome_mean(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.config.outcome_intercept + x @ np.asarray(self.config.outcome_slope)

    def conditional_quantile(self, u: np.ndarray, x: np.ndarray, rng: RngStream | None = None) -> np.ndarray:
        """m(x) + s * inverse-normal(u) on the first coordinate; further coordinates use the auxiliary stream."""
        u = np.clip(np.asarray(u, dtype=float).reshape(-1), _U_FLOOR, 1.0 - _U_FLOOR)
        mean = self.outcome_mean(x)
        if len(mean) != len(u):
            raise DataError(f"{len(u)} uniforms for {len(mean)} feature rows")
        first = mean + self.config.outcome_sd * ndtri(u)
        if self.dim == 1:
            return first[:, None]
        if rng is None:
            raise DataError("multivariate conditional draws need an auxiliary stream")
        rest = mean[:, None] + self.config.outcome_sd * rng.normal((len(u), self.dim - 1))
        return np.hstack([first[:, None], rest])

    def conditional_law(self, x: np.ndarray, edges: np.ndarray | None = None) -> dict[Hashable, float]:
        if edges is None:
            raise DataError("the Gaussian conditional law is reported on bins; pass bin edges")
        mean = self.outcome_mean(np.atleast_2d(x)[:1])
        return GaussianMixture(np.ones(1), np.full((1, self.dim), mean[0]), self.config.outcome_sd).binned_law(edges)

    def sample_features(self, n: int, rng: RngStream) -> np.ndarray:
        return rng.uniform((n, self.n_features))

    def _outcomes(self, mean: np.ndarray, rng: RngStream) -> np.ndarray:
        return mean[:, None] + self.config.outcome_sd * rng.normal((len(mean), self.dim))

    def sample_observational(self, n: int, rng: RngStream) -> Dataset:
        if n < 1:
            raise DataError("need at least one observation")
        x = self.sample_features(n, rng.child(0))
        treated = rng.child(1).uniform(n) < self.propensity(x)
        a = np.where(treated, self.a_star, _control_label(self.a_star))
        mean = self.outcome_mean(x) + np.where(treated, 0.0, self.config.contaminant_shift)
        return Dataset(x=x, a=a, y=self._outcomes(mean, rng.child(2)))

    def sample_counterfactual(self, n: int, rng: RngStream) -> np.ndarray:
        x = self.sample_features(n, rng.child(0))
        return self._outcomes(self.outcome_mean(x), rng.child(2))

    @cached_property
    def _mixture(self) -> GaussianMixture:
        nodes, weights = leggauss(self.config.quadrature_nodes)
        nodes, weights = (nodes + 1) / 2, weights / 2
        grid = np.stack(np.meshgrid(*[nodes] * self.n_features, indexing="ij"), axis=-1).reshape(-1, self.n_features)
        grid_weights = np.prod(
            np.stack(np.meshgrid(*[weights] * self.n_features, indexing="ij"), axis=-1).reshape(-1, self.n_features),
            axis=1,
        )
        means = np.repeat(self.outcome_mean(grid)[:, None], self.dim, axis=1)
        return GaussianMixture(grid_weights / grid_weights.sum(), means, self.config.outcome_sd)

    def counterfactual_law(self) -> GaussianMixture:
        """The counterfactual law as a quadrature mixture over the feature box."""
        return self._mixture


# ---------------------------------------------------------------------------
# Token outcomes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenConfounded:
    config: TokenDgpConfig = field(default_factory=TokenDgpConfig)
    a_star: int = A_STAR_DEFAULT
    outcome_kind: OutcomeKind = OutcomeKind.TOKEN

    @property
    def n_features(self) -> int:
        return 1

    @property
    def dim(self) -> int:
        return self.config.d

    @property
    def k(self) -> int:
        return self.config.k

    def _table(self, group: int) -> NextTokenModel:
        k, content = self.config.k, self.config.content[group]

        def conditional(position: int, prefix: tuple[int, ...]) -> np.ndarray:
            probs = np.zeros(k)
            # content tokens 2..k-1 share the non-ending mass; the pad token never appears before the end
            probs[1 : k - 1] = content[position] / (k - 2)
            probs[k - 1] = 1.0 - content[position]
            return probs

        return NextTokenModel.from_conditionals(k, self.config.d, conditional)

    @cached_property
    def tables(self) -> tuple[NextTokenModel, NextTokenModel]:
        return self._table(0), self._table(1)

    @cached_property
    def _supports(self) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        supports = []
        for table in self.tables:
            pmf = {s: p for s, p in exact_pmf(table).items() if p > 0}
            sequences = sorted(pmf)
            supports.append((np.array(sequences, dtype=np.int64), np.array([pmf[s] for s in sequences])))
        return tuple(supports)

    @staticmethod
    def _groups(x: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(np.asarray(x, dtype=float))[:, 0] > 0.5).astype(np.int64)

    def propensity(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.config.propensity, dtype=float)[self._groups(x)]

    def conditional_pmf(self, group: int) -> dict[tuple[int, ...], float]:
        sequences, probs = self._supports[group]
        return {tuple(int(t) for t in row): float(p) for row, p in zip(sequences, probs)}

    def conditional_quantile(self, u: np.ndarray, x: np.ndarray, rng: RngStream | None = None) -> np.ndarray:
        """A single uniform inverse-transforms the lexicographically ordered support of the per-feature law."""
        u = np.asarray(u, dtype=float).reshape(-1)
        groups = self._groups(x)
        if len(groups) != len(u):
            raise DataError(f"{len(u)} uniforms for {len(groups)} feature rows")
        out = np.full((len(u), self.dim), PAD_TOKEN, dtype=np.int64)
        for group, (sequences, probs) in enumerate(self._supports):
            rows = np.flatnonzero(groups == group)
            if len(rows):
                picks = categorical_quantile(probs, u[rows]) - 1
                out[rows] = sequences[picks]
        return out

    def conditional_law(self, x: np.ndarray, edges: np.ndarray | None = None) -> dict[Hashable, float]:
        return self.conditional_pmf(int(self._groups(x)[0]))

    def sample_features(self, n: int, rng: RngStream) -> np.ndarray:
        return (rng.uniform(n) < self.config.feature_share).astype(float)[:, None]

    def _outcomes(self, groups: np.ndarray, rng: RngStream) -> np.ndarray:
        u = rng.uniform((len(groups), self.dim))
        out = np.empty((len(groups), self.dim), dtype=np.int64)
        for group, table in enumerate(self.tables):
            rows = np.flatnonzero(groups == group)
            if len(rows):
                out[rows] = ancestral_sample(table, u[rows])
        return out

    def sample_observational(self, n: int, rng: RngStream) -> Dataset:
        if n < 1:
            raise DataError("need at least one observation")
        x = self.sample_features(n, rng.child(0))
        treated = rng.child(1).uniform(n) < self.propensity(x)
        a = np.where(treated, self.a_star, _control_label(self.a_star))
        groups = self._groups(x)
        # the contaminant law for untreated rows is the other feature value's table
        y = self._outcomes(np.where(treated, groups, 1 - groups), rng.child(2))
        return Dataset(x=x, a=a, y=y, kind=OutcomeKind.TOKEN, k=self.k)

    def sample_counterfactual(self, n: int, rng: RngStream) -> np.ndarray:
        x = self.sample_features(n, rng.child(0))
        return self._outcomes(self._groups(x), rng.child(2))

    def counterfactual_pmf(self) -> dict[tuple[int, ...], float]:
        share = self.config.feature_share
        mixture: dict[tuple[int, ...], float] = {}
        for group, weight in ((0, 1.0 - share), (1, share)):
            for sequence, p in self.conditional_pmf(group).items():
                mixture[sequence] = mixture.get(sequence, 0.0) + weight * p
        return mixture


def make_dgp(
    config: GaussDgpConfig | TokenDgpConfig, a_star: int = A_STAR_DEFAULT
) -> GaussConfounded | TokenConfounded:
    if isinstance(config, GaussDgpConfig):
        return GaussConfounded(config=config, a_star=a_star)
    return TokenConfounded(config=config, a_star=a_star)


def sample_observational(dgp: Dgp, n: int, rng: RngStream) -> Dataset:
    return dgp.sample_observational(n, rng)


def sample_counterfactual(dgp: Dgp, n: int, rng: RngStream) -> np.ndarray:
    if n < 1:
        raise DataError("need at least one counterfactual draw")
    return dgp.sample_counterfactual(n, rng)


def oracle_nuisances(dgp: Dgp, clip: float = CLIP_DEFAULT) -> NuisancePair:
    return NuisancePair(
        propensity=OraclePropensity(dgp=dgp, clip=clip),
        outcome=OracleOutcomeSampler(dgp=dgp),
        labels={"propensity": "oracle", "outcome": "oracle"},
    )
