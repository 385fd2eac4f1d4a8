from __future__ import annotations

from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from doublegen.constants import PAD_TOKEN
from doublegen.exceptions import DataError


class OutcomeKind(Enum):
    REAL = "real"
    TOKEN = "token"


def _frozen(array: np.ndarray) -> np.ndarray:
    # callers keep their own arrays writable
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def pad_valid(tokens: np.ndarray, k: int) -> np.ndarray:
    """Row-wise check of the end-of-content convention: token k forces every later position to the pad token."""
    tokens = np.atleast_2d(tokens)
    in_range = np.all((tokens >= 1) & (tokens <= k), axis=1)
    ended = np.cumsum(tokens == k, axis=1) > 0
    # positions strictly after the first end-of-content token
    after_end = np.zeros_like(ended)
    after_end[:, 1:] = ended[:, :-1]
    return in_range & np.all(~after_end | (tokens == PAD_TOKEN), axis=1)


def validate_tokens(tokens: np.ndarray, k: int) -> None:
    valid = pad_valid(tokens, k)
    if not np.all(valid):
        bad = int(np.flatnonzero(~valid)[0])
        raise DataError(f"token sequence {bad} violates the pad convention for k={k}")


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    a: int
    y: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """Columnar multiset of observations; ``index`` keeps each row's position in the original dataset."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    kind: OutcomeKind = OutcomeKind.REAL
    k: int | None = None
    index: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        a = np.asarray(self.a, dtype=np.int64)
        dtype = float if self.kind is OutcomeKind.REAL else np.int64
        y = np.asarray(self.y, dtype=dtype)
        if x.ndim == 1:
            x = x.reshape(len(x), -1) if len(x) else x.reshape(0, 0)
        if y.ndim == 1:
            y = y.reshape(len(y), -1) if len(y) else y.reshape(0, 0)
        if not len(x) == len(a) == len(y):
            raise DataError(f"column lengths differ: x={len(x)}, a={len(a)}, y={len(y)}")
        if not np.all(np.isfinite(x)):
            raise DataError("features must be finite")
        if self.kind is OutcomeKind.REAL:
            if not np.all(np.isfinite(y)):
                raise DataError("real outcomes must be finite")
        else:
            if self.k is None:
                raise DataError("token outcomes need the alphabet size k")
            validate_tokens(y, self.k)
        index = np.arange(len(x), dtype=np.int64) if self.index is None else np.asarray(self.index, dtype=np.int64)
        for name, value in (("x", x), ("a", a), ("y", y), ("index", index)):
            object.__setattr__(self, name, _frozen(value))

    @classmethod
    def from_observations(
        cls, observations: Sequence[Observation], kind: OutcomeKind = OutcomeKind.REAL, k: int | None = None
    ) -> Dataset:
        if not observations:
            return cls(x=np.zeros((0, 0)), a=np.zeros(0), y=np.zeros((0, 0)), kind=kind, k=k)
        return cls(
            x=np.stack([np.asarray(o.x, dtype=float) for o in observations]),
            a=np.array([o.a for o in observations]),
            y=np.stack([np.asarray(o.y) for o in observations]),
            kind=kind,
            k=k,
        )

    def __len__(self) -> int:
        return len(self.a)

    def __iter__(self) -> Iterator[Observation]:
        for i in range(len(self)):
            yield Observation(x=self.x[i], a=int(self.a[i]), y=self.y[i])

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def dim(self) -> int:
        return self.y.shape[1]

    def take(self, rows: np.ndarray) -> Dataset:
        """Subset by positional rows, preserving original indices."""
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            x=self.x[rows].reshape(len(rows), self.x.shape[1]),
            a=self.a[rows],
            y=self.y[rows].reshape(len(rows), self.y.shape[1]),
            kind=self.kind,
            k=self.k,
            index=self.index[rows],
        )

    @staticmethod
    def concat(parts: Iterable[Dataset]) -> Dataset:
        parts = list(parts)
        if not parts:
            raise DataError("empty dataset")
        first = parts[0]
        return Dataset(
            x=np.concatenate([p.x for p in parts]),
            a=np.concatenate([p.a for p in parts]),
            y=np.concatenate([p.y for p in parts]),
            kind=first.kind,
            k=first.k,
            index=np.concatenate([p.index for p in parts]),
        )


@dataclass(frozen=True)
class FoldedDataset:
    fold1: Dataset
    fold2: Dataset

    @property
    def folds(self) -> tuple[Dataset, Dataset]:
        return self.fold1, self.fold2

    @property
    def n(self) -> int:
        return len(self.fold1) + len(self.fold2)

    def combined(self) -> Dataset:
        """Both folds in fold-then-index order."""
        return Dataset.concat(self.folds)


class RngStream:
    """Seeded random stream; identical ``(seed, key)`` reproduces an identical draw sequence.

    Streams are owned by one consumer at a time.
    """

    def __init__(self, seed: int, *key: int) -> None:
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.generator = np.random.default_rng(sequence)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"

    def child(self, *key: int) -> RngStream:
        return RngStream(self.seed, *self.key, *key)

    def uniform(self, size: int | tuple[int, ...] | None = None) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, size: int | tuple[int, ...] | None = None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def integers(self, high: int, size: int | tuple[int, ...] | None = None) -> np.ndarray:
        return self.generator.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def partition_folds(dataset: Dataset, rng: RngStream) -> FoldedDataset:
    """Uniformly random split into folds of sizes floor(n/2) and ceil(n/2); rows keep dataset order within a fold."""
    n = len(dataset)
    if n == 0:
        raise DataError("empty dataset")
    perm = rng.permutation(n)
    first = np.sort(perm[: n // 2])
    second = np.sort(perm[n // 2 :])
    return FoldedDataset(fold1=dataset.take(first), fold2=dataset.take(second))


def filter_treated(dataset: Dataset, a_star: int) -> Dataset:
    return dataset.take(np.flatnonzero(dataset.a == a_star))
