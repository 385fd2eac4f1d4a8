"""Divergences between generated samples and the counterfactual law."""

from __future__ import annotations

import math
from collections.abc import Hashable, Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.stats import wasserstein_distance

from doublegen.core import RngStream
from doublegen.exceptions import DataError

DEFAULT_BINS = 50


@dataclass(frozen=True)
class MetricReport:
    metric: str
    value: float
    sizes: tuple[int, int]
    config: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.value >= 0:
            raise DataError(f"metric {self.metric} must be non-negative, got {self.value}")


def _equalize(a: np.ndarray, b: np.ndarray, rng: RngStream | None) -> tuple[np.ndarray, np.ndarray]:
    """Resample the larger sample down to the smaller size without replacement."""
    if len(a) == len(b):
        return a, b
    rng = rng or RngStream(0)
    if len(a) > len(b):
        return a[np.sort(rng.generator.choice(len(a), size=len(b), replace=False))], b
    return a, b[np.sort(rng.generator.choice(len(b), size=len(a), replace=False))]


def wasserstein1_1d(a: np.ndarray, b: np.ndarray, rng: RngStream | None = None) -> float:
    """Exact empirical W1 on the line (mean absolute gap of the sorted samples)."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if len(a) == 0 or len(b) == 0:
        raise DataError("wasserstein distance needs non-empty samples")
    a, b = _equalize(a, b, rng)
    return float(wasserstein_distance(a, b))


def sliced_w1(a: np.ndarray, b: np.ndarray, projections: int, rng: RngStream) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DataError("sliced W1 needs two sample matrices of equal dimension")
    if a.shape[1] < 2:
        raise DataError("sliced W1 needs dimension >= 2; use wasserstein1_1d")
    if len(a) == 0 or len(b) == 0:
        raise DataError("wasserstein distance needs non-empty samples")
    directions = rng.normal((projections, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    a, b = _equalize(a, b, rng)
    return float(np.mean([wasserstein_distance(a @ g, b @ g) for g in directions]))


def default_edges(a: np.ndarray, b: np.ndarray, bins: int = DEFAULT_BINS) -> np.ndarray:
    pooled = np.concatenate([np.ravel(a), np.ravel(b)])
    low, high = float(pooled.min()), float(pooled.max())
    if low == high:
        low, high = low - 0.5, high + 0.5
    return np.linspace(low, high, bins + 1)


def binned_frequencies(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Frequencies over the bins plus an overflow bin at each end."""
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise DataError("bin edges must be strictly increasing")
    values = np.ravel(values)
    counts = np.bincount(np.digitize(values, edges), minlength=len(edges) + 1)
    return counts / max(len(values), 1)


def tv_binned(a: np.ndarray, b: np.ndarray, edges: np.ndarray) -> float:
    if np.size(a) == 0 or np.size(b) == 0:
        raise DataError("total variation needs non-empty samples")
    return 0.5 * float(np.abs(binned_frequencies(a, edges) - binned_frequencies(b, edges)).sum())


def tv_categorical(p: Mapping[Hashable, float], q: Mapping[Hashable, float]) -> float:
    support = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(s, 0.0) - q.get(s, 0.0)) for s in support)


def _as_mapping(pmf: Mapping[Hashable, float] | np.ndarray) -> Mapping[Hashable, float]:
    if isinstance(pmf, Mapping):
        return pmf
    return dict(enumerate(np.asarray(pmf, dtype=float).tolist()))


def kl_categorical(p: Mapping[Hashable, float] | np.ndarray, q: Mapping[Hashable, float] | np.ndarray) -> float:
    """KL(p || q) with 0 log 0 = 0; +inf when p is not absolutely continuous with respect to q."""
    p, q = _as_mapping(p), _as_mapping(q)
    terms = []
    for s, ps in p.items():
        if ps <= 0:
            continue
        qs = q.get(s, 0.0)
        if qs <= 0:
            return math.inf
        terms.append(ps * math.log(ps / qs))
    return max(math.fsum(terms), 0.0)


def chi2_divergence(p: Mapping[Hashable, float] | np.ndarray, q: Mapping[Hashable, float] | np.ndarray) -> float:
    """Chi-squared divergence of p from q: the integral of (dp/dq - 1)^2 dq, or +inf unless p << q."""
    p, q = _as_mapping(p), _as_mapping(q)
    if any(ps > 0 and q.get(s, 0.0) <= 0 for s, ps in p.items()):
        return math.inf
    return math.fsum((p.get(s, 0.0) / qs - 1.0) ** 2 * qs for s, qs in q.items() if qs > 0)


def empirical_pmf(sequences: np.ndarray) -> dict[tuple[int, ...], float]:
    rows, counts = np.unique(np.atleast_2d(sequences), axis=0, return_counts=True)
    total = counts.sum()
    return {tuple(int(t) for t in row): c / total for row, c in zip(rows, counts)}


def weighted_reference(
    outcomes: np.ndarray, weights: np.ndarray, size: int, rng: RngStream
) -> np.ndarray:
    """Resample outcomes with replacement in proportion to non-negative weights."""
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise DataError("reference weights must be non-negative with positive total")
    picks = rng.generator.choice(len(outcomes), size=size, replace=True, p=weights / weights.sum())
    return np.asarray(outcomes)[picks]


def sample_metrics(
    samples: np.ndarray,
    reference: np.ndarray,
    rng: RngStream,
    bins: int = DEFAULT_BINS,
    projections: int = 64,
) -> list[MetricReport]:
    """W1 (sliced above one dimension) and binned TV on the first coordinate for real-valued samples."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    sizes = (len(samples), len(reference))
    reports = []
    if samples.shape[1] == 1:
        reports.append(MetricReport("w1", wasserstein1_1d(samples[:, 0], reference[:, 0], rng.child(0)), sizes))
    else:
        value = sliced_w1(samples, reference, projections, rng.child(0))
        reports.append(MetricReport("w1", value, sizes, {"projections": projections}))
    edges = default_edges(samples[:, 0], reference[:, 0], bins)
    reports.append(MetricReport("tv", tv_binned(samples[:, 0], reference[:, 0], edges), sizes, {"bins": bins}))
    return reports


def token_metrics(
    samples: np.ndarray, model_pmf: Mapping[Hashable, float], truth_pmf: Mapping[Hashable, float]
) -> list[MetricReport]:
    """Exact KL from the counterfactual law to the model's implied law, plus sample TV to the counterfactual law.

    TV is NaN without samples.
    """
    sizes = (len(samples), 0)
    tv = tv_categorical(empirical_pmf(samples), truth_pmf) if len(samples) else math.nan
    return [
        MetricReport("kl", kl_categorical(truth_pmf, model_pmf), sizes),
        MetricReport("tv", tv, sizes),
    ]
