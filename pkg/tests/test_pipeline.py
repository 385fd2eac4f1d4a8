import json
import math

import numpy as np
import pandas as pd
import pytest

from doublegen import pipeline
from doublegen.config import NuisanceConfig, Scenario, TrainingConfig
from doublegen.constants import Stream
from doublegen.core import RngStream, partition_folds
from doublegen.exceptions import DataError, StageError
from doublegen.nuisance import MisspecifiedOutcomeSampler, OraclePropensity, PropensityModel
from doublegen.risk import Method
from doublegen.synth import make_dgp


def _data(config, seed=0):
    return make_dgp(config.dgp, config.a_star).sample_observational(config.n, RngStream(seed, Stream.DATA))


def test_stage_labels_errors():
    with pytest.raises(StageError, match="train: boom") as info:
        with pipeline.stage("train"):
            raise DataError("boom")

    assert info.value.stage == "train"


def test_simulate_is_deterministic(tmp_path, token_config):
    first = pipeline.simulate(token_config, tmp_path / "a")
    second = pipeline.simulate(token_config, tmp_path / "b")

    assert [p.name for p in first] == ["data_seed0.csv", "counterfactual_seed0.csv"]
    assert all(a.read_text() == b.read_text() for a, b in zip(first, second))


@pytest.mark.parametrize(
    "scenario, propensity, outcome",
    [
        (Scenario.BOTH_RIGHT, "fitted", "fitted"),
        (Scenario.BOTH_WRONG, "wrong", "wrong"),
    ],
)
def test_fit_nuisances_labels(token_config, scenario, propensity, outcome):
    dgp = make_dgp(token_config.dgp)
    folded = partition_folds(_data(token_config), RngStream(0))

    pairs = pipeline.fit_nuisances(token_config, dgp, folded, scenario)

    assert [p.labels for p in pairs] == [{"propensity": propensity, "outcome": outcome}] * 2
    if scenario is Scenario.BOTH_WRONG:
        assert isinstance(pairs[0].outcome, MisspecifiedOutcomeSampler)
        # the single feature is dropped, leaving an intercept-only propensity
        assert isinstance(pairs[0].propensity, PropensityModel) and len(pairs[0].propensity.coef) == 1


def test_fit_nuisances_with_oracle_right_halves(flow_config):
    config = flow_config.model_copy(update={"nuisance": NuisanceConfig(neighbors=5, right="oracle")})
    dgp = make_dgp(config.dgp)
    folded = partition_folds(_data(config), RngStream(0))

    pairs = pipeline.fit_nuisances(config, dgp, folded, Scenario.OUTCOME_WRONG)

    assert isinstance(pairs[0].propensity, OraclePropensity)
    assert pairs[0].labels == {"propensity": "oracle", "outcome": "wrong"}


def test_train_token_model(token_config):
    result = pipeline.train(token_config, _data(token_config), Method.DOUBLEGEN, Scenario.BOTH_RIGHT, seed=0)

    assert len(result.history) == token_config.training.iterations
    assert result.history[-1] < result.history[0]
    assert math.isfinite(result.risk)


@pytest.mark.parametrize("config_name", ["flow_config", "diffusion_config"])
def test_train_network_models(request, config_name):
    config = request.getfixturevalue(config_name)

    result = pipeline.train(config, _data(config), Method.DOUBLEGEN, Scenario.BOTH_RIGHT, seed=0)
    samples = pipeline.generate(result.backend, result.theta, 50, seed=0)

    assert len(result.history) == config.training.epochs
    assert samples.shape == (50, 1)
    assert np.all(np.isfinite(samples))


def test_model_documents_reload(token_config):
    result = pipeline.train(token_config, _data(token_config), Method.NAIVE, Scenario.BOTH_RIGHT, seed=0)
    document = pipeline.model_document(result.backend, result.theta, method="naive")

    backend, theta = pipeline.load_model(document)

    assert document["method"] == "naive"
    reloaded = pipeline.generate(backend, theta, 20, 3)
    assert np.array_equal(reloaded, pipeline.generate(result.backend, result.theta, 20, 3))


def test_saved_nuisances_rebuild_the_trained_risk(tmp_path, flow_config):
    pipeline.simulate(flow_config, tmp_path)
    written = pipeline.train_files(flow_config, tmp_path, tmp_path, Method.DOUBLEGEN, Scenario.BOTH_WRONG)

    model_file = pipeline.model_path(tmp_path, Scenario.BOTH_WRONG, Method.DOUBLEGEN, 0)
    assert pipeline.nuisance_path(model_file) in written
    document = json.loads(model_file.read_text())
    backend, theta = pipeline.load_model(document)
    dataset, nuisances = pipeline.load_nuisances(flow_config, pipeline.nuisance_path(model_file))

    assert len(dataset) == flow_config.n
    assert isinstance(nuisances[0].outcome, MisspecifiedOutcomeSampler)
    assert [p.labels for p in nuisances] == [{"propensity": "wrong", "outcome": "wrong"}] * 2
    risk = pipeline.saved_risk(flow_config, document, backend, theta, nuisances, dataset, seed=0)
    assert risk == pytest.approx(document["risk"], rel=1e-9)


def test_nuisance_file_needs_both_folds(tmp_path, token_config):
    path = tmp_path / "model.nuisance.json"
    path.write_text('{"folds": []}')

    with pytest.raises(DataError, match="one pair per fold, found 0"):
        pipeline.load_nuisances(token_config, path)


def test_load_model_rejects_malformed_documents():
    with pytest.raises(DataError, match="malformed model document"):
        pipeline.load_model({"backend": "flow"})
    with pytest.raises(DataError, match="unknown backend"):
        pipeline.load_model({"backend": "gan", "settings": {}, "hypothesis": {}})


def test_generate_rejects_negative_count(token_config):
    backend = pipeline.make_backend(token_config)

    with pytest.raises(DataError, match="non-negative"):
        pipeline.generate(backend, backend.init_hypothesis(RngStream(0)), -1, 0)


def test_evaluate_against_an_explicit_reference(flow_config):
    reference = RngStream(0).normal((100, 1))

    reports = pipeline.evaluate(flow_config, reference, 0, reference=reference)

    assert {r.metric: r.value for r in reports} == {"w1": 0.0, "tv": 0.0}


def test_evaluate_with_a_weighted_reference(flow_config):
    dgp = make_dgp(flow_config.dgp)
    samples = dgp.sample_counterfactual(200, RngStream(1))

    reports = pipeline.evaluate(flow_config, samples, 0, dataset=_data(flow_config))

    assert [r.metric for r in reports] == ["w1", "tv"]
    assert reports[0].sizes == (200, 200)


def test_evaluate_token_samples_with_generalization(token_config):
    metrics = token_config.metrics.model_copy(update={"generalization": True})
    config = token_config.model_copy(update={"metrics": metrics})
    backend = pipeline.make_backend(config)
    reference = backend.reference(make_dgp(config.dgp))
    samples = pipeline.generate(backend, reference, 500, 0)

    reports = {r.metric: r.value for r in pipeline.evaluate(config, samples, 0, theta=reference, backend=backend)}

    assert reports["kl"] == pytest.approx(0.0, abs=1e-12)
    assert reports["gen_error"] == pytest.approx(0.0, abs=1e-12)
    assert reports["tv"] < 0.1


def test_run_cell_turns_failures_into_error_rows(token_config):
    config = token_config.model_copy(update={"n": 20, "nuisance": NuisanceConfig(neighbors=50)})

    rows = pipeline.run_cell(config, Scenario.BOTH_RIGHT, Method.DOUBLEGEN, 0)

    assert len(rows) == 1
    assert rows[0]["error"].startswith("nuisance:")
    assert math.isnan(rows[0]["value"])


def test_run_cell_reports_risk_then_metrics(token_config):
    rows = pipeline.run_cell(token_config, Scenario.BOTH_RIGHT, Method.ORACLE, 0)

    assert [r["metric"] for r in rows] == ["risk", "kl", "tv"]
    assert all(r["error"] == "" for r in rows)


def _metrics(values: dict[str, float]) -> pd.DataFrame:
    rows = [
        {"scenario": "both_right", "method": m, "metric": "kl", "value": v, "seed": 0, "n": 10, "error": ""}
        for m, v in values.items()
    ]
    rows.append({"scenario": "both_right", "method": "ipw", "metric": "", "value": math.nan, "seed": 0, "n": 10,
                 "error": "train: diverged"})
    return pd.DataFrame(rows)


@pytest.mark.parametrize(
    "values, mark",
    [
        ({"naive": 0.5, "plugin": 0.3, "doublegen": 0.2}, "*!"),
        ({"naive": 0.5, "plugin": 0.3, "doublegen": 0.4}, "*"),
        ({"naive": 0.1, "plugin": 0.3, "doublegen": 0.4}, ""),
        ({"naive": 0.2, "plugin": 0.3, "doublegen": 0.2}, "*!"),
    ],
)
def test_summarize_marks_doublegen(values, mark):
    summary = pipeline.summarize(_metrics(values))

    row = summary[summary["method"] == "doublegen"].iloc[0]
    assert row["kl_mark"] == mark
    assert "ipw" not in summary["method"].tolist()


def test_experiment_writes_results_and_is_deterministic(tmp_path, token_config):
    config = token_config.model_copy(update={"scenarios": [Scenario.BOTH_RIGHT, Scenario.OUTCOME_WRONG]})

    metrics, summary = pipeline.experiment(config, tmp_path / "a")
    again, _ = pipeline.experiment(config, tmp_path / "b")

    assert {p.name for p in (tmp_path / "a").iterdir()} == {"config.resolved.json", "metrics.csv", "summary.csv"}
    assert len(summary) == 8
    assert {"kl", "tv", "risk", "kl_mark", "tv_mark"} <= set(summary.columns)
    pd.testing.assert_frame_equal(metrics, again)
    assert metrics["method"].tolist()[:3] == ["naive"] * 3


def test_report_re_renders_summary(tmp_path, token_config):
    pipeline.experiment(token_config, tmp_path)

    summary = pipeline.report(tmp_path / "metrics.csv", tmp_path / "report")

    assert (tmp_path / "report" / "summary.csv").exists()
    assert sorted(summary["method"]) == sorted(m.value for m in token_config.methods)


@pytest.mark.slow
def test_worker_count_does_not_change_results(tmp_path, token_config):
    serial, _ = pipeline.experiment(token_config, tmp_path / "serial")
    parallel, _ = pipeline.experiment(token_config.with_overrides(threads=2), tmp_path / "parallel")

    pd.testing.assert_frame_equal(serial, parallel)


@pytest.mark.slow
@pytest.mark.parametrize(
    "scenario, rivals",
    [
        (Scenario.OUTCOME_WRONG, ["naive", "plugin"]),
        (Scenario.PROPENSITY_WRONG, ["naive", "ipw"]),
    ],
)
def test_doublegen_beats_the_estimators_a_wrong_nuisance_breaks(token_config, scenario, rivals):
    config = token_config.model_copy(
        update={
            "n": 4000,
            "seeds": [0, 1, 2],
            "scenarios": [scenario],
            "nuisance": NuisanceConfig(neighbors=50),
            "training": TrainingConfig(iterations=500, mc_u=8, mc_report=8),
        }
    )

    metrics = pd.DataFrame(pipeline.grid(config))

    kl = metrics[metrics["metric"] == "kl"].pivot_table(index="seed", columns="method", values="value")
    for rival in rivals:
        wins = int((kl["doublegen"] < kl[rival]).sum())
        assert wins >= 2, f"doublegen beat {rival} on {wins} of 3 seeds"
