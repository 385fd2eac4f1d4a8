"""Experiment stages shared by the CLI and the MCP tools: simulate, train, generate, evaluate, experiment, report."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from doublegen.autoreg import AutoregBackend, TabularFit, exact_pmf
from doublegen.config import ExperimentConfig, GaussDgpConfig, Scenario, write_resolved
from doublegen.constants import Stream
from doublegen.core import Dataset, FoldedDataset, OutcomeKind, RngStream, partition_folds
from doublegen.diffusion import DiffusionBackend, NoiseSchedule
from doublegen.exceptions import DataError, DoubleGenError, StageError
from doublegen.flow import FlowBackend
from doublegen.metrics import MetricReport, empirical_pmf, sample_metrics, token_metrics, weighted_reference
from doublegen.nuisance import (
    Downweight,
    NuisancePair,
    PropensityFit,
    fit_coarse_outcome_sampler,
    fit_outcome_sampler,
    fit_propensity,
    fit_subset_outcome_sampler,
    load_nuisance_pair,
    nuisance_document,
)
from doublegen.risk import Method, RiskObjective, RiskSpec, generalization_error
from doublegen.storage import (
    read_dataset,
    read_json,
    read_metrics,
    read_samples,
    write_dataset,
    write_json,
    write_metrics,
    write_samples,
    write_training_log,
)
from doublegen.synth import Dgp, make_dgp, oracle_nuisances
from doublegen.training import NetworkFit

logger = logging.getLogger("doublegen.pipeline")

Backend = FlowBackend | DiffusionBackend | AutoregBackend

# lower is better for every divergence that gets summary marks
DIVERGENCES = ("w1", "tv", "kl", "gen_error")


@contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except DoubleGenError as exc:
        raise StageError(name, exc) from exc


def data_path(out: Path, seed: int) -> Path:
    return out / f"data_seed{seed}.csv"


def counterfactual_path(out: Path, seed: int) -> Path:
    return out / f"counterfactual_seed{seed}.csv"


def model_path(out: Path, scenario: Scenario, method: Method, seed: int) -> Path:
    return out / f"model_{scenario.value}_{method.value}_seed{seed}.json"


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


def make_backend(config: ExperimentConfig) -> Backend:
    training = config.training
    if config.backend == "autoreg":
        return AutoregBackend(
            k=config.dgp.k,
            d=config.dgp.d,
            fit=TabularFit(iterations=training.iterations, learning_rate=training.tabular_learning_rate),
        )
    fit = NetworkFit(epochs=training.epochs, batch_size=training.batch_size, learning_rate=training.learning_rate)
    if config.backend == "flow":
        return FlowBackend(
            dim=config.dgp.dim, hidden=training.hidden, steps=config.flow.steps, mc_tu=config.flow.mc_tu, fit=fit
        )
    d = config.diffusion
    return DiffusionBackend(
        dim=config.dgp.dim,
        schedule=NoiseSchedule(beta=d.beta, t_min=d.t_min, t_max=d.t_max),
        hidden=training.hidden,
        steps=d.steps,
        mc=d.mc,
        fit=fit,
    )


def backend_from_settings(name: str, settings: dict[str, Any]) -> Backend:
    if name == "flow":
        return FlowBackend(
            dim=settings["dim"], hidden=settings["hidden"], steps=settings["steps"], mc_tu=settings["mc_tu"]
        )
    if name == "diffusion":
        schedule = NoiseSchedule(beta=settings["beta"], t_min=settings["t_min"], t_max=settings["t_max"])
        return DiffusionBackend(
            dim=settings["dim"],
            schedule=schedule,
            hidden=settings["hidden"],
            steps=settings["steps"],
            mc=settings["mc"],
        )
    if name == "autoreg":
        return AutoregBackend(k=settings["k"], d=settings["d"])
    raise DataError(f"unknown backend {name!r}")


def model_document(backend: Backend, theta: Any, **labels: Any) -> dict[str, Any]:
    return {"backend": backend.name, "settings": backend.settings(), "hypothesis": theta.to_dict(), **labels}


def outcome_dim(backend: Backend) -> int:
    return backend.d if isinstance(backend, AutoregBackend) else backend.dim


def nuisance_path(model_file: Path) -> Path:
    return model_file.with_suffix(".nuisance.json")


def load_nuisances(
    config: ExperimentConfig, nuisance_file: Path
) -> tuple[Dataset | None, tuple[NuisancePair, NuisancePair]]:
    """The per-fold pairs saved next to a model, with k-NN samplers rebuilt from their data file.

    The data file comes back too; it is ``None`` when both pairs are oracles.
    """
    dgp = make_dgp(config.dgp, config.a_star)
    k = config.dgp.k if config.backend == "autoreg" else None
    dataset = None
    pairs = []
    for document in read_json(nuisance_file).get("folds", []):
        source = document.get("outcome", {}).get("data")
        if source is not None and dataset is None:
            dataset = read_dataset(Path(source), k=k)
        pairs.append(load_nuisance_pair(document, dataset, dgp))
    if len(pairs) != 2:
        raise DataError(f"nuisance file {nuisance_file} needs one pair per fold, found {len(pairs)}")
    return dataset, (pairs[0], pairs[1])


def saved_risk(
    config: ExperimentConfig,
    document: dict[str, Any],
    backend: Backend,
    theta: Any,
    nuisances: tuple[NuisancePair, NuisancePair],
    dataset: Dataset,
    seed: int,
) -> float:
    """The reported risk of a saved model, recomputed from its saved nuisances on the same folds."""
    spec = RiskSpec(method=Method(document["method"]), mc_u=config.training.mc_report, a_star=config.a_star)
    folded = partition_folds(dataset, RngStream(seed, Stream.FOLDS))
    objective = RiskObjective(folded=folded, loss=backend.loss, spec=spec, nuisances=nuisances)
    return objective.value(theta, RngStream(seed, Stream.EVALUATION, 1))


def load_model(document: dict[str, Any]) -> tuple[Backend, Any]:
    try:
        backend = backend_from_settings(document["backend"], document["settings"])
        return backend, backend.load(document["hypothesis"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed model document: missing {exc}") from exc


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def simulate(config: ExperimentConfig, out: Path) -> list[Path]:
    """Observational and counterfactual CSVs per seed."""
    dgp = make_dgp(config.dgp, config.a_star)
    written = []
    with stage("simulate"):
        for seed in config.seeds:
            dataset = dgp.sample_observational(config.n, RngStream(seed, Stream.DATA))
            counterfactual = dgp.sample_counterfactual(config.n, RngStream(seed, Stream.COUNTERFACTUAL))
            written.append(write_dataset(dataset, data_path(out, seed)))
            written.append(write_samples(counterfactual, dgp.outcome_kind, counterfactual_path(out, seed)))
            treated = int((dataset.a == dgp.a_star).sum())
            logger.info("simulated seed %d: %d rows, %d treated", seed, len(dataset), treated)
    return written


def _n_features(config: ExperimentConfig) -> int:
    return config.dgp.p if isinstance(config.dgp, GaussDgpConfig) else 1


def fit_nuisances(
    config: ExperimentConfig, dgp: Dgp, folded: FoldedDataset, scenario: Scenario
) -> tuple[NuisancePair, NuisancePair]:
    """One pair per fold; the scenario decides which halves are deliberately misspecified."""
    knobs = config.nuisance
    a_star = config.a_star
    p = _n_features(config)
    remaining = tuple(f for f in range(p) if f not in knobs.dropped_features)
    oracle = oracle_nuisances(dgp, knobs.clip) if knobs.right == "oracle" else None
    pairs = []
    for fold in folded.folds:
        if scenario.propensity_wrong:
            if knobs.propensity_misspec == "drop_features":
                fit = PropensityFit(max_iter=knobs.max_iter, clip=knobs.clip, features=remaining)
            else:
                downweight = Downweight(knobs.threshold_feature, knobs.threshold, knobs.downweight_factor)
                fit = PropensityFit(max_iter=knobs.max_iter, clip=knobs.clip, downweight=downweight)
            propensity = fit_propensity(fold, a_star, fit)
        elif oracle is not None:
            propensity = oracle.propensity
        else:
            propensity = fit_propensity(fold, a_star, PropensityFit(max_iter=knobs.max_iter, clip=knobs.clip))

        if scenario.outcome_wrong:
            if knobs.outcome_misspec == "subset":
                outcome = fit_subset_outcome_sampler(
                    fold, a_star, knobs.neighbors, knobs.threshold_feature, knobs.threshold
                )
            else:
                outcome = fit_coarse_outcome_sampler(fold, a_star, knobs.neighbors, knobs.kept_features or remaining)
        elif oracle is not None:
            outcome = oracle.outcome
        else:
            outcome = fit_outcome_sampler(fold, a_star, knobs.neighbors)

        labels = {
            "propensity": "wrong" if scenario.propensity_wrong else knobs.right,
            "outcome": "wrong" if scenario.outcome_wrong else knobs.right,
        }
        pairs.append(NuisancePair(propensity=propensity, outcome=outcome, labels=labels))
    return pairs[0], pairs[1]


@dataclass(frozen=True)
class TrainResult:
    backend: Backend
    theta: Any
    history: list[float]
    risk: float
    nuisances: tuple[NuisancePair, NuisancePair] | None = None


def train(
    config: ExperimentConfig,
    dataset: Dataset,
    method: Method,
    scenario: Scenario,
    seed: int,
    counterfactual: np.ndarray | None = None,
) -> TrainResult:
    """Fit nuisances for the scenario, build the method's risk and minimize it."""
    dgp = make_dgp(config.dgp, config.a_star)
    backend = make_backend(config)
    spec = RiskSpec(method=method, mc_u=config.training.mc_u, a_star=config.a_star)
    nuisances = None
    with stage("nuisance"):
        folded = partition_folds(dataset, RngStream(seed, Stream.FOLDS))
        if method.uses_nuisances:
            nuisances = fit_nuisances(config, dgp, folded, scenario)
    with stage("train"):
        objective = RiskObjective(
            folded=folded, loss=backend.loss, spec=spec, nuisances=nuisances, counterfactual=counterfactual
        )
        initial = backend.init_hypothesis(RngStream(seed, Stream.INIT))
        theta, history = backend.train(objective, initial, RngStream(seed, Stream.TRAINING))
        reported = replace(objective, spec=replace(spec, mc_u=config.training.mc_report))
        risk = reported.value(theta, RngStream(seed, Stream.EVALUATION, 1))
    logger.info("trained %s/%s seed %d: risk %.6f", scenario.value, method.value, seed, risk)
    return TrainResult(backend=backend, theta=theta, history=history, risk=risk, nuisances=nuisances)


def generate(backend: Backend, theta: Any, count: int, seed: int) -> np.ndarray:
    """Samples from the fitted transport; one seed gives row-aligned samples across hypotheses."""
    if count < 0:
        raise DataError("count must be non-negative")
    with stage("generate"):
        return backend.sample(theta, count, RngStream(seed, Stream.SAMPLING))


def evaluate(
    config: ExperimentConfig,
    samples: np.ndarray,
    seed: int,
    theta: Any = None,
    backend: Backend | None = None,
    reference: np.ndarray | None = None,
    dataset: Dataset | None = None,
) -> list[MetricReport]:
    """Divergences of ``samples`` from the counterfactual law.

    Real outcomes are compared with ``reference`` when given, else with an inverse-propensity
    weighted resample of ``dataset``, else with fresh counterfactual draws.
    """
    dgp = make_dgp(config.dgp, config.a_star)
    rng = RngStream(seed, Stream.EVALUATION)
    with stage("evaluate"):
        if dgp.outcome_kind is OutcomeKind.TOKEN:
            model_pmf = exact_pmf(theta) if theta is not None else empirical_pmf(samples)
            reports = token_metrics(samples, model_pmf, dgp.counterfactual_pmf())
        else:
            if reference is None and dataset is not None:
                propensity = fit_propensity(dataset, config.a_star, PropensityFit(clip=config.nuisance.clip))
                alpha = propensity.evaluate(dataset.x)
                treated = dataset.a == config.a_star
                reference = weighted_reference(dataset.y[treated], alpha[treated], config.metrics.samples, rng.child(2))
            elif reference is None:
                reference = dgp.sample_counterfactual(config.metrics.samples, rng.child(0))
            reports = sample_metrics(
                samples, reference, rng.child(1), bins=config.metrics.bins, projections=config.metrics.projections
            )
        if config.metrics.generalization and theta is not None and backend is not None:
            value = generalization_error(theta, backend, dgp, config.metrics.samples, rng.child(3))
            # Monte Carlo estimates can fall below zero; reports hold non-negative values
            reports.append(MetricReport("gen_error", max(value, 0.0), (config.metrics.samples, 0)))
    return reports


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


def _row(scenario: Scenario, method: Method, seed: int, n: int, metric: str, value: float, error: str = "") -> dict:
    return {
        "scenario": scenario.value,
        "method": method.value,
        "metric": metric,
        "value": value,
        "seed": seed,
        "n": n,
        "error": error,
    }


def run_cell(config: ExperimentConfig, scenario: Scenario, method: Method, seed: int) -> list[dict[str, Any]]:
    """One (scenario, method, seed) cell; stage failures become a single error row."""
    dgp = make_dgp(config.dgp, config.a_star)
    try:
        with stage("simulate"):
            dataset = dgp.sample_observational(config.n, RngStream(seed, Stream.DATA))
            counterfactual = None
            if method is Method.ORACLE:
                counterfactual = dgp.sample_counterfactual(config.n, RngStream(seed, Stream.COUNTERFACTUAL))
        result = train(config, dataset, method, scenario, seed, counterfactual)
        samples = generate(result.backend, result.theta, config.metrics.samples, seed)
        reports = evaluate(config, samples, seed, theta=result.theta, backend=result.backend)
    except StageError as exc:
        logger.warning("cell %s/%s seed %d failed: %s", scenario.value, method.value, seed, exc)
        return [_row(scenario, method, seed, config.n, "", math.nan, str(exc))]
    rows = [_row(scenario, method, seed, config.n, "risk", result.risk)]
    rows.extend(_row(scenario, method, seed, config.n, r.metric, r.value) for r in reports)
    return rows


def summarize(metrics: pd.DataFrame) -> pd.DataFrame:
    """Mean over seeds per (scenario, method) with doublegen marked ``*`` when it is at most naive
    and ``!`` when it is at least as good as every other method."""
    ok = metrics[metrics["error"].fillna("") == ""]
    if ok.empty:
        return pd.DataFrame(columns=["scenario", "method"])
    table = ok.pivot_table(index=["scenario", "method"], columns="metric", values="value", aggfunc="mean")
    table = table.reset_index()
    table.columns.name = None
    for metric in [m for m in DIVERGENCES if m in table.columns]:
        marks = []
        for _, row in table.iterrows():
            mark = ""
            if row["method"] == Method.DOUBLEGEN.value:
                peers = table[(table["scenario"] == row["scenario"]) & (table["method"] != Method.DOUBLEGEN.value)]
                naive = peers.loc[peers["method"] == Method.NAIVE.value, metric]
                if len(naive) and row[metric] <= naive.iloc[0]:
                    mark += "*"
                if len(peers) and row[metric] <= peers[metric].min():
                    mark += "!"
            marks.append(mark)
        table[f"{metric}_mark"] = marks
    return table


def grid(config: ExperimentConfig) -> list[dict[str, Any]]:
    """The full scenario x method x seed grid; rows keep grid order whatever the worker count."""
    cells = [(sc, m, s) for sc in config.scenarios for m in config.methods for s in config.seeds]
    logger.info("running %d cells on %d workers", len(cells), config.n_jobs)
    results = Parallel(n_jobs=config.n_jobs)(delayed(run_cell)(config, *cell) for cell in cells)
    return [row for cell in results for row in cell]


def experiment(config: ExperimentConfig, out: Path) -> tuple[pd.DataFrame, pd.DataFrame]:
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(config, out)
    write_metrics(grid(config), out / "metrics.csv")
    metrics = read_metrics(out / "metrics.csv")
    summary = summarize(metrics)
    summary.to_csv(out / "summary.csv", index=False)
    return metrics, summary


def report(metrics_file: Path, out: Path) -> pd.DataFrame:
    summary = summarize(read_metrics(metrics_file))
    out.mkdir(parents=True, exist_ok=True)
    summary.to_csv(out / "summary.csv", index=False)
    return summary


# ---------------------------------------------------------------------------
# File-based stages for the CLI
# ---------------------------------------------------------------------------


def train_files(
    config: ExperimentConfig, data_dir: Path, out: Path, method: Method, scenario: Scenario
) -> list[Path]:
    """Train from simulated CSVs; writes a model JSON, a training log and any fitted nuisances per seed."""
    k = config.dgp.k if config.backend == "autoreg" else None
    written = []
    for seed in config.seeds:
        with stage("train"):
            dataset = read_dataset(data_path(data_dir, seed), k=k)
            counterfactual = None
            if method is Method.ORACLE:
                counterfactual, _ = read_samples(counterfactual_path(data_dir, seed))
        result = train(config, dataset, method, scenario, seed, counterfactual)
        target = model_path(out, scenario, method, seed)
        document = model_document(
            result.backend, result.theta, method=method.value, scenario=scenario.value, seed=seed, risk=result.risk
        )
        written.append(write_json(document, target))
        written.append(write_training_log(result.history, target.with_suffix(".log.csv")))
        if result.nuisances is not None:
            source = str(data_path(data_dir, seed).resolve())
            folds = [nuisance_document(pair, source) for pair in result.nuisances]
            written.append(write_json({"folds": folds}, nuisance_path(target)))
    return written


def generate_file(model_file: Path, count: int, seed: int, target: Path) -> Path:
    with stage("generate"):
        backend, theta = load_model(read_json(model_file))
    samples = generate(backend, theta, count, seed)
    return write_samples(samples, backend.outcome_kind, target, dim=outcome_dim(backend))


def evaluate_file(
    config: ExperimentConfig,
    samples_file: Path,
    seed: int,
    out: Path,
    model_file: Path | None = None,
    reference_file: Path | None = None,
    data_file: Path | None = None,
) -> list[MetricReport]:
    """Divergences of a sample file; a model saved with nuisances also gets its risk recomputed."""
    with stage("evaluate"):
        samples, _ = read_samples(samples_file)
        theta = backend = None
        labels: dict[str, Any] = {}
        if model_file is not None:
            document = read_json(model_file)
            backend, theta = load_model(document)
            labels = {k: document.get(k, "") for k in ("scenario", "method")}
        reference = read_samples(reference_file)[0] if reference_file is not None else None
        k = config.dgp.k if config.backend == "autoreg" else None
        dataset = read_dataset(data_file, k=k) if data_file is not None else None
    reports = evaluate(config, samples, seed, theta=theta, backend=backend, reference=reference, dataset=dataset)
    measured = [(r.metric, r.value, r.sizes[0]) for r in reports]
    if model_file is not None and nuisance_path(model_file).exists():
        with stage("evaluate"):
            source, nuisances = load_nuisances(config, nuisance_path(model_file))
            source = source if source is not None else dataset
            if source is not None:
                risk = saved_risk(config, document, backend, theta, nuisances, source, seed)
                logger.info("risk under the saved nuisances = %.6g", risk)
                measured.insert(0, ("risk", risk, len(source)))
    rows = [
        {
            "scenario": labels.get("scenario", ""),
            "method": labels.get("method", ""),
            "metric": metric,
            "value": value,
            "seed": seed,
            "n": n,
            "error": "",
        }
        for metric, value, n in measured
    ]
    write_metrics(rows, out / "evaluation.csv")
    return reports
