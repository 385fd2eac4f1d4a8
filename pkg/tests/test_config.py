import json

import pytest

from doublegen.config import (
    ExperimentConfig,
    GaussDgpConfig,
    Scenario,
    TokenDgpConfig,
    load_config,
    parse_config,
    write_resolved,
)
from doublegen.exceptions import ConfigError
from doublegen.risk import Method


def test_defaults():
    config = ExperimentConfig()

    assert config.backend == "diffusion"
    assert isinstance(config.dgp, GaussDgpConfig)
    assert config.methods == [Method.NAIVE, Method.PLUGIN, Method.IPW, Method.DOUBLEGEN]
    assert config.training.mc_u == 8
    assert config.training.mc_report == 128
    assert config.nuisance.clip == 100.0


def test_dgp_kind_selects_the_model():
    config = parse_config(json.dumps({"backend": "autoreg", "dgp": {"kind": "token", "k": 4}}))

    assert isinstance(config.dgp, TokenDgpConfig)
    assert config.dgp.k == 4


@pytest.mark.parametrize(
    "document, message",
    [
        ({"backend": "autoreg"}, "needs a 'token' data-generating process"),
        ({"seeds": [1, 1]}, "seeds must be distinct"),
        ({"seeds": []}, "at least one seed"),
        ({"methods": []}, "at least one entry"),
        ({"scenarios": ["both_right", "both_right"]}, "grid entries must be distinct"),
        ({"diffusion": {"t_max": 1.0}}, "nearly forget its start"),
        ({"diffusion": {"t_min": 2.0, "t_max": 1.0}}, "t_min must be below t_max"),
        ({"dgp": {"kind": "gauss", "p": 3}}, "one entry per feature"),
        ({"nuisance": {"dropped_features": [5]}}, "nuisance feature indices"),
        ({"n": 0}, "greater than or equal to 1"),
        ({"n_jobs": 0}, "positive worker count"),
        ({"n_jobs": -2}, "positive worker count"),
        ({"methods": ["bogus"]}, "methods"),
    ],
)
def test_invalid_documents_raise_config_error(document, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(json.dumps(document))


def test_malformed_json_is_a_config_error():
    with pytest.raises(ConfigError):
        parse_config("{not json")


def test_load_config(tmp_path, write_config):
    assert load_config(None) == ExperimentConfig()
    assert load_config(write_config({"n": 10})).n == 10
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config(tmp_path / "missing.json")


def test_write_resolved_materializes_every_default(tmp_path):
    config = ExperimentConfig(n=12)

    path = write_resolved(config, tmp_path)

    document = json.loads(path.read_text())
    assert path.name == "config.resolved.json"
    assert document["training"]["epochs"] == 50
    assert parse_config(path.read_text()) == config


def test_with_overrides():
    config = ExperimentConfig(seeds=[1, 2, 3])

    assert config.with_overrides(seed=9, threads=4).seeds == [9]
    assert config.with_overrides(threads=4).n_jobs == 4
    assert config.with_overrides() == config
    assert config.with_overrides(threads=-1).n_jobs == -1
    with pytest.raises(ConfigError, match="positive worker count"):
        config.with_overrides(threads=0)


@pytest.mark.parametrize(
    "scenario, propensity_wrong, outcome_wrong",
    [
        (Scenario.BOTH_RIGHT, False, False),
        (Scenario.OUTCOME_WRONG, False, True),
        (Scenario.PROPENSITY_WRONG, True, False),
        (Scenario.BOTH_WRONG, True, True),
    ],
)
def test_scenario_flags(scenario, propensity_wrong, outcome_wrong):
    assert scenario.propensity_wrong is propensity_wrong
    assert scenario.outcome_wrong is outcome_wrong
