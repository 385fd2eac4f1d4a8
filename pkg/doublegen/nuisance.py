"""Nuisance estimation: the clipped inverse propensity and the conditional outcome transport map, per fold."""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Hashable, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Protocol

import numpy as np
from scipy.special import expit
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import log_loss

from doublegen.constants import CLIP_DEFAULT
from doublegen.core import Dataset, OutcomeKind, RngStream
from doublegen.exceptions import DataError, NumericalError
from doublegen.metrics import chi2_divergence

if TYPE_CHECKING:
    from doublegen.synth import Dgp

logger = logging.getLogger("doublegen.nuisance")

_QUERY_CHUNK = 256


class InversePropensity(Protocol):
    def evaluate(self, x: np.ndarray) -> np.ndarray: ...


class BoundSampler(Protocol):
    def draw(self, u: np.ndarray, rng: RngStream | None = None) -> np.ndarray: ...

    def subset(self, rows: np.ndarray) -> BoundSampler: ...


class OutcomeSampler(Protocol):
    def bind(self, x: np.ndarray) -> BoundSampler: ...

    def induced_law(self, x: np.ndarray, edges: np.ndarray | None = None) -> dict[Hashable, float]: ...


# ---------------------------------------------------------------------------
# Inverse propensity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Downweight:
    """Scale the inverse propensity of rows with ``x[feature] < threshold`` down by ``factor``."""

    feature: int
    threshold: float
    factor: float = 4.0


@dataclass(frozen=True)
class PropensityModel:
    """Logistic propensity; ``coef`` is the intercept followed by one slope per entry of ``features``."""

    coef: np.ndarray
    clip: float = CLIP_DEFAULT
    features: tuple[int, ...] | None = None
    downweight: Downweight | None = None

    def __post_init__(self) -> None:
        if self.clip < 1:
            raise DataError(f"clip ceiling must be >= 1, got {self.clip}")
        object.__setattr__(self, "coef", np.asarray(self.coef, dtype=float))

    def scores(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        columns = x if self.features is None else x[:, list(self.features)]
        if columns.shape[1] != len(self.coef) - 1:
            raise DataError(f"feature dimension {columns.shape[1]} != {len(self.coef) - 1} fitted slopes")
        return self.coef[0] + columns @ self.coef[1:]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        with np.errstate(divide="ignore"):
            alpha = 1.0 / expit(self.scores(x))
        if self.downweight is not None:
            low = x[:, self.downweight.feature] < self.downweight.threshold
            alpha = np.where(low, alpha / self.downweight.factor, alpha)
        return np.clip(alpha, 1.0, self.clip)

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"coef": self.coef.tolist(), "clip": self.clip}
        if self.features is not None:
            data["features"] = list(self.features)
        if self.downweight is not None:
            data["downweight"] = vars(self.downweight)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PropensityModel:
        features = data.get("features")
        downweight = data.get("downweight")
        return cls(
            coef=np.asarray(data["coef"], dtype=float),
            clip=float(data["clip"]),
            features=tuple(features) if features is not None else None,
            downweight=Downweight(**downweight) if downweight else None,
        )


@dataclass(frozen=True)
class ConstantInversePropensity:
    """A fixed weight for every x; used for ablations, not clipped."""

    value: float

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return np.full(len(np.atleast_2d(x)), float(self.value))


@dataclass(frozen=True)
class PropensityFit:
    max_iter: int = 1000
    clip: float = CLIP_DEFAULT
    features: tuple[int, ...] | None = None
    downweight: Downweight | None = None


def inverse_propensity(model: InversePropensity, x: np.ndarray) -> np.ndarray | float:
    values = model.evaluate(x)
    return float(values[0]) if np.ndim(x) == 1 else values


def fit_propensity(fold: Dataset, a_star: int, config: PropensityFit | None = None) -> PropensityModel:
    """Minimize the empirical logistic loss of ``1(a = a*)`` on the selected features."""
    config = config or PropensityFit()
    treated = (fold.a == a_star).astype(int)
    if treated.min(initial=1) == treated.max(initial=0):
        raise DataError("degenerate fold")
    columns = fold.x if config.features is None else fold.x[:, list(config.features)]

    if columns.shape[1] == 0:
        share = treated.mean()
        coef = np.array([np.log(share / (1 - share))])
    else:
        model = LogisticRegression(penalty=None, max_iter=config.max_iter, tol=1e-10)
        model.fit(columns, treated)
        coef = np.concatenate([model.intercept_, model.coef_[0]])

    fitted = PropensityModel(coef=coef, clip=config.clip, features=config.features, downweight=config.downweight)
    loss = log_loss(treated, expit(fitted.scores(fold.x)), labels=[0, 1])
    if not np.isfinite(loss) or not np.all(np.isfinite(coef)):
        raise NumericalError(f"propensity fit diverged (log loss {loss})")
    logger.debug("propensity fitted on %d rows: coef=%s log-loss=%.4f", len(fold), coef, loss)
    return fitted


# ---------------------------------------------------------------------------
# Outcome transport maps
# ---------------------------------------------------------------------------


def _bin_law(values: np.ndarray, edges: np.ndarray) -> dict[Hashable, float]:
    # bin 0 and bin len(edges) are the overflow bins
    bins = np.digitize(values, edges)
    counts = Counter(int(b) for b in bins)
    return {b: c / len(values) for b, c in sorted(counts.items())}


def outcome_law(outcomes: np.ndarray, kind: OutcomeKind, edges: np.ndarray | None = None) -> dict[Hashable, float]:
    """Empirical law of outcomes: binned first coordinate for real vectors, sequences for tokens."""
    if kind is OutcomeKind.TOKEN:
        counts = Counter(tuple(int(t) for t in row) for row in outcomes)
        return {key: c / len(outcomes) for key, c in sorted(counts.items())}
    if edges is None:
        raise DataError("binning real outcomes needs bin edges")
    return _bin_law(np.asarray(outcomes, dtype=float)[:, 0], edges)


@dataclass(frozen=True)
class BoundNeighbors:
    neighbor_outcomes: np.ndarray  # (B, k, d)

    def subset(self, rows: np.ndarray) -> BoundNeighbors:
        return BoundNeighbors(neighbor_outcomes=self.neighbor_outcomes[rows])

    def draw(self, u: np.ndarray, rng: RngStream | None = None) -> np.ndarray:
        u = np.asarray(u, dtype=float).reshape(len(self.neighbor_outcomes), -1)
        k = self.neighbor_outcomes.shape[1]
        picks = np.minimum(np.floor(u * k).astype(np.int64), k - 1)
        return np.take_along_axis(self.neighbor_outcomes, picks[:, :, None], axis=1)


@dataclass(frozen=True)
class KnnOutcomeSampler:
    """k nearest treated neighbours in Euclidean distance, ties broken by original dataset index."""

    x: np.ndarray
    y: np.ndarray
    index: np.ndarray
    k: int
    kind: OutcomeKind = OutcomeKind.REAL
    features: tuple[int, ...] | None = None

    def _columns(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x if self.features is None else x[:, list(self.features)]

    def neighbors(self, x: np.ndarray) -> np.ndarray:
        """Positions of the k nearest stored rows, sorted by (distance, dataset index)."""
        queries = self._columns(x)
        stored = self._columns(self.x)
        if queries.shape[1] != stored.shape[1]:
            raise DataError(f"feature dimension {queries.shape[1]} != {stored.shape[1]}")
        k = self.k
        result = np.empty((len(queries), k), dtype=np.int64)
        for start in range(0, len(queries), _QUERY_CHUNK):
            block = queries[start : start + _QUERY_CHUNK]
            dist = np.sum((block[:, None, :] - stored[None, :, :]) ** 2, axis=2)
            kth = np.partition(dist, k - 1, axis=1)[:, k - 1 : k]
            closer = dist < kth
            tied = dist == kth
            room = k - closer.sum(axis=1, keepdims=True)
            # stored rows are in index order, so the earliest ties are the lowest indices
            chosen = closer | (tied & (np.cumsum(tied, axis=1) <= room))
            positions = np.nonzero(chosen)[1].reshape(len(block), k)
            order = np.argsort(np.take_along_axis(dist, positions, axis=1), axis=1, kind="stable")
            result[start : start + len(block)] = np.take_along_axis(positions, order, axis=1)
        return result

    def bind(self, x: np.ndarray) -> BoundNeighbors:
        return BoundNeighbors(neighbor_outcomes=self.y[self.neighbors(x)])

    def induced_law(self, x: np.ndarray, edges: np.ndarray | None = None) -> dict[Hashable, float]:
        outcomes = self.y[self.neighbors(np.atleast_2d(x)[:1])[0]]
        return outcome_law(outcomes, self.kind, edges)

    def to_reference(self, data_file: str) -> dict[str, Any]:
        """The stored rows are named by dataset index; the data file holds their values."""
        data: dict[str, Any] = {"kind": "knn", "data": data_file, "rows": self.index.tolist(), "k": self.k}
        if self.features is not None:
            data["features"] = list(self.features)
        return data

    @classmethod
    def from_reference(cls, data: dict[str, Any], dataset: Dataset) -> KnnOutcomeSampler:
        rows = np.asarray(data["rows"], dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= len(dataset)):
            raise DataError(f"sampler rows fall outside the {len(dataset)}-row data file")
        stored = dataset.take(rows)
        features = data.get("features")
        return cls(
            x=stored.x,
            y=stored.y,
            index=stored.index,
            k=int(data["k"]),
            kind=dataset.kind,
            features=tuple(features) if features is not None else None,
        )


@dataclass(frozen=True)
class MisspecifiedOutcomeSampler:
    """A sampler deliberately fit on a biased view of the fold."""

    inner: KnnOutcomeSampler
    reason: str

    def bind(self, x: np.ndarray) -> BoundNeighbors:
        return self.inner.bind(x)

    def induced_law(self, x: np.ndarray, edges: np.ndarray | None = None) -> dict[Hashable, float]:
        return self.inner.induced_law(x, edges)


@dataclass(frozen=True)
class BoundOracle:
    dgp: Dgp
    x: np.ndarray

    def subset(self, rows: np.ndarray) -> BoundOracle:
        return BoundOracle(dgp=self.dgp, x=self.x[rows])

    def draw(self, u: np.ndarray, rng: RngStream | None = None) -> np.ndarray:
        u = np.asarray(u, dtype=float).reshape(len(self.x), -1)
        mc = u.shape[1]
        draws = self.dgp.conditional_quantile(u.reshape(-1), np.repeat(self.x, mc, axis=0), rng)
        return draws.reshape(len(self.x), mc, -1)


@dataclass(frozen=True)
class OracleOutcomeSampler:
    dgp: Dgp

    def bind(self, x: np.ndarray) -> BoundOracle:
        return BoundOracle(dgp=self.dgp, x=np.atleast_2d(np.asarray(x, dtype=float)))

    def induced_law(self, x: np.ndarray, edges: np.ndarray | None = None) -> dict[Hashable, float]:
        return self.dgp.conditional_law(np.asarray(x, dtype=float), edges)


@dataclass(frozen=True)
class OraclePropensity:
    dgp: Dgp
    clip: float = CLIP_DEFAULT

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return np.minimum(1.0 / self.dgp.propensity(np.atleast_2d(x)), self.clip)


@dataclass(frozen=True)
class NuisancePair:
    propensity: InversePropensity
    outcome: OutcomeSampler
    labels: dict[str, str] = field(default_factory=dict)


def fit_outcome_sampler(
    fold: Dataset, a_star: int, k: int, features: Sequence[int] | None = None
) -> KnnOutcomeSampler:
    treated = fold.take(np.flatnonzero(fold.a == a_star))
    if k < 1 or len(treated) < k:
        raise DataError(f"insufficient treated support: {len(treated)} treated rows for k={k}")
    order = np.argsort(treated.index, kind="stable")
    return KnnOutcomeSampler(
        x=treated.x[order],
        y=treated.y[order],
        index=treated.index[order],
        k=k,
        kind=treated.kind,
        features=tuple(features) if features is not None else None,
    )


def fit_subset_outcome_sampler(
    fold: Dataset, a_star: int, k: int, feature: int, threshold: float
) -> MisspecifiedOutcomeSampler:
    """Outcome sampler trained only on rows with ``x[feature] >= threshold``."""
    subset = fold.take(np.flatnonzero(fold.x[:, feature] >= threshold))
    return MisspecifiedOutcomeSampler(
        inner=fit_outcome_sampler(subset, a_star, k), reason=f"subset x[{feature}] >= {threshold}"
    )


def fit_coarse_outcome_sampler(
    fold: Dataset, a_star: int, k: int, features: Sequence[int]
) -> MisspecifiedOutcomeSampler:
    """Outcome sampler matching on ``features`` only."""
    return MisspecifiedOutcomeSampler(
        inner=fit_outcome_sampler(fold, a_star, k, features=features), reason=f"matches on features {list(features)}"
    )


def sample_outcome(sampler: OutcomeSampler, u: float, x: np.ndarray, rng: RngStream | None = None) -> np.ndarray:
    """psi(u | x) for a single uniform u and feature vector x."""
    bound = sampler.bind(np.atleast_2d(np.asarray(x, dtype=float)))
    return bound.draw(np.array([[u]]), rng)[0, 0]


def chi2_nuisance_diagnostic(
    sampler: OutcomeSampler, dgp: Dgp, x_grid: np.ndarray, edges: np.ndarray | None = None
) -> float:
    """Largest chi-squared divergence over ``x_grid`` between the sampler-induced and true conditional laws."""
    worst = 0.0
    for x in np.atleast_2d(np.asarray(x_grid, dtype=float)):
        induced = sampler.induced_law(x, edges)
        truth = dgp.conditional_law(x, edges)
        worst = max(worst, chi2_divergence(induced, truth))
    return worst


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _propensity_document(model: InversePropensity) -> dict[str, Any]:
    if isinstance(model, PropensityModel):
        return {"kind": "logistic", **model.to_dict()}
    if isinstance(model, OraclePropensity):
        return {"kind": "oracle", "clip": model.clip}
    if isinstance(model, ConstantInversePropensity):
        return {"kind": "constant", "value": model.value}
    raise DataError(f"cannot serialize propensity {type(model).__name__}")


def _outcome_document(sampler: OutcomeSampler, data_file: str) -> dict[str, Any]:
    if isinstance(sampler, KnnOutcomeSampler):
        return sampler.to_reference(data_file)
    if isinstance(sampler, MisspecifiedOutcomeSampler):
        return {**sampler.inner.to_reference(data_file), "reason": sampler.reason}
    if isinstance(sampler, OracleOutcomeSampler):
        return {"kind": "oracle"}
    raise DataError(f"cannot serialize outcome sampler {type(sampler).__name__}")


def nuisance_document(pair: NuisancePair, data_file: str) -> dict[str, Any]:
    """JSON form of a fitted pair; k-NN samplers refer to rows of ``data_file``."""
    return {
        "propensity": _propensity_document(pair.propensity),
        "outcome": _outcome_document(pair.outcome, data_file),
        "labels": dict(pair.labels),
    }


def load_nuisance_pair(document: dict[str, Any], dataset: Dataset | None, dgp: Dgp | None = None) -> NuisancePair:
    """Rebuild a pair from :func:`nuisance_document`.

    ``dataset`` is the referenced data file; ``dgp`` serves oracle halves.
    """
    try:
        prop, out = document["propensity"], document["outcome"]
        if prop["kind"] == "logistic":
            propensity: InversePropensity = PropensityModel.from_dict(prop)
        elif prop["kind"] == "constant":
            propensity = ConstantInversePropensity(float(prop["value"]))
        elif prop["kind"] == "oracle" and dgp is not None:
            propensity = OraclePropensity(dgp=dgp, clip=float(prop["clip"]))
        else:
            raise DataError(f"cannot load propensity of kind {prop['kind']!r}")

        if out["kind"] == "oracle" and dgp is not None:
            outcome: OutcomeSampler = OracleOutcomeSampler(dgp=dgp)
        elif out["kind"] == "knn" and dataset is not None:
            knn = KnnOutcomeSampler.from_reference(out, dataset)
            outcome = MisspecifiedOutcomeSampler(inner=knn, reason=out["reason"]) if "reason" in out else knn
        else:
            raise DataError(f"cannot load outcome sampler of kind {out['kind']!r}")
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed nuisance document: missing {exc}") from exc
    return NuisancePair(propensity=propensity, outcome=outcome, labels=dict(document.get("labels", {})))
