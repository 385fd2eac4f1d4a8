"""CSV and JSON persistence for datasets, samples, models, metrics and training logs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from doublegen.core import Dataset, OutcomeKind
from doublegen.exceptions import DataError

METRIC_COLUMNS = ["scenario", "method", "metric", "value", "seed", "n", "error"]


def outcome_columns(kind: OutcomeKind, dim: int) -> list[str]:
    prefix = "tok" if kind is OutcomeKind.TOKEN else "y"
    return [f"{prefix}_{j + 1}" for j in range(dim)]


def _write(frame: pd.DataFrame, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return path


def _read(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except FileNotFoundError as exc:
        raise DataError(f"missing data file {path}") from exc
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _outcome_kind(columns: list[str]) -> OutcomeKind:
    if any(c.startswith("tok_") for c in columns):
        return OutcomeKind.TOKEN
    if any(c.startswith("y_") for c in columns):
        return OutcomeKind.REAL
    raise DataError("no outcome columns (y_* or tok_*)")


def dataset_frame(dataset: Dataset) -> pd.DataFrame:
    """Columns ``x_1..x_p, a`` then ``y_1..y_d`` or ``tok_1..tok_d``."""
    frame = pd.DataFrame(dataset.x, columns=[f"x_{j + 1}" for j in range(dataset.n_features)])
    frame["a"] = dataset.a
    for name, column in zip(outcome_columns(dataset.kind, dataset.dim), dataset.y.T):
        frame[name] = column
    return frame


def write_dataset(dataset: Dataset, path: Path) -> Path:
    return _write(dataset_frame(dataset), path)


def read_dataset(path: Path, k: int | None = None) -> Dataset:
    frame = _read(path)
    kind = _outcome_kind(list(frame.columns))
    x = frame[[c for c in frame.columns if c.startswith("x_")]].to_numpy(dtype=float)
    y = frame[[c for c in frame.columns if c.startswith(("y_", "tok_"))]].to_numpy()
    if kind is OutcomeKind.TOKEN and k is None:
        k = int(y.max(initial=2))
    return Dataset(x=x, a=frame["a"].to_numpy(), y=y, kind=kind, k=k)


def samples_frame(samples: np.ndarray, kind: OutcomeKind, dim: int | None = None) -> pd.DataFrame:
    samples = np.asarray(samples)
    dim = dim if dim is not None else (samples.shape[1] if samples.ndim == 2 else 1)
    return pd.DataFrame(samples.reshape(len(samples), dim), columns=outcome_columns(kind, dim))


def write_samples(samples: np.ndarray, kind: OutcomeKind, path: Path, dim: int | None = None) -> Path:
    return _write(samples_frame(samples, kind, dim), path)


def read_samples(path: Path) -> tuple[np.ndarray, OutcomeKind]:
    frame = _read(path)
    kind = _outcome_kind(list(frame.columns))
    dtype = np.int64 if kind is OutcomeKind.TOKEN else float
    return frame.to_numpy(dtype=dtype), kind


def write_json(data: dict[str, Any], path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return path


def read_json(path: Path) -> dict[str, Any]:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing file {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def write_training_log(history: list[float], path: Path) -> Path:
    return _write(pd.DataFrame({"epoch": np.arange(len(history)), "risk": history}), path)


def write_metrics(rows: list[dict[str, Any]], path: Path) -> Path:
    return _write(pd.DataFrame(rows, columns=METRIC_COLUMNS), path)


def read_metrics(path: Path) -> pd.DataFrame:
    frame = _read(path)
    missing = set(METRIC_COLUMNS) - set(frame.columns)
    if missing:
        raise DataError(f"metrics file {path} lacks columns {sorted(missing)}")
    return frame
