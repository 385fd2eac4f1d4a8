"""Autoregressive token backend: tabular next-token softmax model, masked cross-entropy, inverse-transform sampling."""

from __future__ import annotations

import itertools
import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Any, ClassVar

import numpy as np
from scipy.special import log_softmax, softmax

from doublegen.constants import MAX_ENUMERATION, PAD_TOKEN
from doublegen.core import OutcomeKind, RngStream, pad_valid, validate_tokens
from doublegen.exceptions import DataError, NumericalError, ReferenceUnavailableError
from doublegen.nn import OptimizerState, Params, adam_step

if TYPE_CHECKING:
    from doublegen.risk import RiskObjective

logger = logging.getLogger("doublegen.autoreg")

TokenTuple = tuple[int, ...]


def prefix_codes(tokens: np.ndarray, position: int, k: int) -> np.ndarray:
    """Row index of each sequence's prefix ``tokens[:, :position]`` in the position's table."""
    codes = np.zeros(len(tokens), dtype=np.int64)
    for i in range(position):
        codes = codes * k + (tokens[:, i] - 1)
    return codes


def left_padded_context(prefix: TokenTuple, d: int) -> TokenTuple:
    return (PAD_TOKEN,) * (d - 1 - len(prefix)) + tuple(prefix)


def _prefix_of_code(code: int, position: int, k: int) -> TokenTuple:
    digits = []
    for _ in range(position):
        code, digit = divmod(code, k)
        digits.append(digit + 1)
    return tuple(reversed(digits))


@dataclass(frozen=True)
class NextTokenModel:
    """One logit table per position; ``logits[j]`` has a row for each prefix in ``[k]^j``."""

    kind: ClassVar[str] = "next_token"

    k: int
    d: int
    logits: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if self.k < 2 or self.d < 1:
            raise DataError(f"need k >= 2 and d >= 1, got k={self.k}, d={self.d}")
        if len(self.logits) != self.d:
            raise DataError(f"expected {self.d} position tables, got {len(self.logits)}")
        for j, table in enumerate(self.logits):
            if table.shape != (self.k**j, self.k):
                raise DataError(f"position {j + 1} table has shape {table.shape}, expected {(self.k**j, self.k)}")
        object.__setattr__(self, "logits", tuple(np.asarray(t, dtype=float) for t in self.logits))

    @classmethod
    def uniform(cls, k: int, d: int) -> NextTokenModel:
        return cls(k=k, d=d, logits=tuple(np.zeros((k**j, k)) for j in range(d)))

    @classmethod
    def from_conditionals(cls, k: int, d: int, conditional: Callable[[int, TokenTuple], np.ndarray]) -> NextTokenModel:
        """Build from ``conditional(position, prefix) -> probabilities over [k]`` (position is 0-based)."""
        tables = []
        for j in range(d):
            rows = [np.asarray(conditional(j, _prefix_of_code(c, j, k)), dtype=float) for c in range(k**j)]
            with np.errstate(divide="ignore"):
                tables.append(np.log(np.vstack(rows)))
        return cls(k=k, d=d, logits=tuple(tables))

    @classmethod
    def from_pmf(cls, pmf: Mapping[TokenTuple, float], k: int, d: int) -> NextTokenModel:
        """Conditionals implied by a law on sequences (or by weighted counts); unvisited prefixes stay uniform."""
        counts = [np.zeros((k**j, k)) for j in range(d)]
        for sequence, mass in pmf.items():
            if mass <= 0:
                continue
            tokens = np.asarray(sequence, dtype=np.int64)[None, :]
            for j in range(d):
                if np.any(tokens[0, :j] == k):
                    break
                counts[j][prefix_codes(tokens, j, k)[0], tokens[0, j] - 1] += mass
        tables = []
        for table in counts:
            totals = table.sum(axis=1, keepdims=True)
            probs = np.where(totals > 0, table / np.where(totals > 0, totals, 1.0), 1.0 / k)
            with np.errstate(divide="ignore"):
                tables.append(np.log(probs))
        return cls(k=k, d=d, logits=tuple(tables))

    def log_probabilities(self, position: int) -> np.ndarray:
        return log_softmax(self.logits[position], axis=1)

    def probabilities(self, position: int) -> np.ndarray:
        return softmax(self.logits[position], axis=1)

    def parameters(self) -> Params:
        return list(self.logits)

    def with_parameters(self, params: Params) -> NextTokenModel:
        return replace(self, logits=tuple(params))

    def to_dict(self) -> dict[str, Any]:
        tables = []
        for j, table in enumerate(self.logits):
            tables.append({
                ",".join(map(str, left_padded_context(_prefix_of_code(c, j, self.k), self.d))): row.tolist()
                for c, row in enumerate(table)
            })
        return {"kind": self.kind, "k": self.k, "d": self.d, "logits": tables}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> NextTokenModel:
        if data.get("kind") != cls.kind:
            raise DataError(f"expected a {cls.kind} model, got {data.get('kind')!r}")
        k, d = int(data["k"]), int(data["d"])
        tables = []
        for j, rows in enumerate(data["logits"]):
            keys = [",".join(map(str, left_padded_context(_prefix_of_code(c, j, k), d))) for c in range(k**j)]
            tables.append(np.asarray([rows[key] for key in keys], dtype=float))
        return cls(k=k, d=d, logits=tuple(tables))


def _active(tokens: np.ndarray, position: int, k: int) -> np.ndarray:
    """Positions not forced to pad, i.e. no end-of-content token earlier in the row."""
    if position == 0:
        return np.ones(len(tokens), dtype=bool)
    return ~np.any(tokens[:, :position] == k, axis=1)


def ce_losses(theta: NextTokenModel, tokens: np.ndarray) -> np.ndarray:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] != theta.d:
        raise DataError(f"sequence length {tokens.shape[1]} != model length {theta.d}")
    total = np.zeros(len(tokens))
    for j in range(theta.d):
        scored = tokens[:, j] != PAD_TOKEN
        if not np.any(scored):
            continue
        log_probs = theta.log_probabilities(j)[prefix_codes(tokens, j, theta.k), tokens[:, j] - 1]
        if np.any(np.isneginf(log_probs[scored])):
            raise NumericalError("infinite loss")
        total -= np.where(scored, log_probs, 0.0)
    return total


def ce_loss(theta: NextTokenModel, y: np.ndarray) -> float:
    """Cross-entropy over the non-pad positions, contexts left-padded with the pad token."""
    y = np.asarray(y, dtype=np.int64)
    validate_tokens(y, theta.k)
    return float(ce_losses(theta, y[None, :])[0])


def ce_loss_gradient(theta: NextTokenModel, tokens: np.ndarray, weights: np.ndarray) -> Params:
    """Gradient of ``sum_i weights[i] * ce_loss(theta, tokens[i])`` with respect to the logit tables."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    weights = np.asarray(weights, dtype=float)
    grads = [np.zeros_like(table) for table in theta.logits]
    rows = np.arange(len(tokens))
    for j in range(theta.d):
        effective = np.where(tokens[:, j] != PAD_TOKEN, weights, 0.0)
        codes = prefix_codes(tokens, j, theta.k)
        contribution = effective[:, None] * theta.probabilities(j)[codes]
        contribution[rows, tokens[:, j] - 1] -= effective
        np.add.at(grads[j], codes, contribution)
    return grads


def categorical_quantile(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Left-continuous generalized inverse of the CDF: smallest token m with F(m) >= u."""
    probs = np.atleast_2d(probs)
    u = np.asarray(u, dtype=float).reshape(-1)
    cdf = np.cumsum(probs, axis=1)
    below = np.sum(cdf < u[:, None], axis=1)
    return np.minimum(below, probs.shape[1] - 1) + 1


def ancestral_sample(theta: NextTokenModel, u: np.ndarray) -> np.ndarray:
    """Inverse-transform ancestral sampling; once token k is emitted the rest of the row is padding."""
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    if u.shape[1] != theta.d:
        raise DataError(f"need {theta.d} uniforms per sequence, got {u.shape[1]}")
    tokens = np.full(u.shape, PAD_TOKEN, dtype=np.int64)
    for j in range(theta.d):
        active = _active(tokens, j, theta.k)
        probs = theta.probabilities(j)[prefix_codes(tokens, j, theta.k)]
        drawn = categorical_quantile(probs, u[:, j])
        tokens[:, j] = np.where(active, drawn, PAD_TOKEN)
    return tokens[0] if single else tokens


def valid_sequences(k: int, d: int) -> np.ndarray:
    if k**d > MAX_ENUMERATION:
        raise DataError(f"k^d = {k**d} exceeds the enumeration limit {MAX_ENUMERATION}")
    grid = np.array(list(itertools.product(range(1, k + 1), repeat=d)), dtype=np.int64)
    return grid[pad_valid(grid, k)]


def sequence_log_probabilities(theta: NextTokenModel, tokens: np.ndarray) -> np.ndarray:
    """Log-probability under tau(theta) of each sequence: sum over positions not forced to pad."""
    tokens = np.atleast_2d(tokens)
    total = np.zeros(len(tokens))
    for j in range(theta.d):
        active = _active(tokens, j, theta.k)
        log_probs = theta.log_probabilities(j)[prefix_codes(tokens, j, theta.k), tokens[:, j] - 1]
        total += np.where(active, log_probs, 0.0)
    return total


def exact_pmf(theta: NextTokenModel) -> dict[TokenTuple, float]:
    sequences = valid_sequences(theta.k, theta.d)
    probs = np.exp(sequence_log_probabilities(theta, sequences))
    return {tuple(int(t) for t in row): float(p) for row, p in zip(sequences, probs)}


class CrossEntropyLoss:
    """Loss handle for the risk estimators; the cross-entropy is exact, so ``rng`` is unused."""

    name = "cross_entropy"

    def losses(self, theta: NextTokenModel, outcomes: np.ndarray, rng: RngStream | None = None) -> np.ndarray:
        return ce_losses(theta, outcomes)

    def weighted_gradient(
        self, theta: NextTokenModel, outcomes: np.ndarray, weights: np.ndarray, rng: RngStream | None = None
    ) -> Params:
        return ce_loss_gradient(theta, outcomes, weights)


@dataclass(frozen=True)
class TabularFit:
    iterations: int = 500
    learning_rate: float = 0.05


def fit_tabular(
    objective: RiskObjective,
    config: TabularFit,
    rng: RngStream,
    theta: NextTokenModel,
) -> tuple[NextTokenModel, list[float]]:
    """Full-batch adaptive gradient descent on the logits, starting from ``theta``.

    AIPW weights can be negative, so the optimization runs over unconstrained logits and the softmax keeps
    every row on the simplex.
    """
    state = OptimizerState.fresh(theta.parameters(), learning_rate=config.learning_rate)
    history: list[float] = []
    for iteration in range(config.iterations):
        value, grads = objective.value_and_gradient(theta, rng.child(iteration))
        if not np.isfinite(value):
            raise NumericalError(f"risk diverged at iteration {iteration}")
        history.append(value)
        params, state = adam_step(theta.parameters(), grads, state)
        theta = theta.with_parameters(params)
        logger.debug("iteration %d risk %.6f", iteration, value)
    return theta, history


class AutoregBackend:
    name = "autoreg"
    outcome_kind = OutcomeKind.TOKEN

    def __init__(self, k: int, d: int, fit: TabularFit | None = None) -> None:
        self.k = k
        self.d = d
        self.fit = fit or TabularFit()
        self.loss = CrossEntropyLoss()

    def settings(self) -> dict[str, Any]:
        return {"k": self.k, "d": self.d}

    def init_hypothesis(self, rng: RngStream) -> NextTokenModel:
        return NextTokenModel.uniform(self.k, self.d)

    def reference(self, dgp: Any) -> NextTokenModel:
        law = getattr(dgp, "counterfactual_pmf", None)
        if law is None:
            raise ReferenceUnavailableError()
        return NextTokenModel.from_pmf(law(), self.k, self.d)

    def train(
        self, objective: RiskObjective, theta: NextTokenModel, rng: RngStream
    ) -> tuple[NextTokenModel, list[float]]:
        return fit_tabular(objective, self.fit, rng, theta)

    def sample(self, theta: NextTokenModel, count: int, rng: RngStream) -> np.ndarray:
        if count == 0:
            return np.zeros((0, self.d), dtype=np.int64)
        return ancestral_sample(theta, rng.uniform((count, self.d)))

    def load(self, data: dict[str, Any]) -> NextTokenModel:
        return NextTokenModel.from_dict(data)
