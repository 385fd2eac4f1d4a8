import json
from pathlib import Path
from unittest.mock import AsyncMock, MagicMock

import numpy as np
import pytest
from fastmcp import Context

from doublegen.config import (
    DiffusionConfig,
    ExperimentConfig,
    FlowConfig,
    GaussDgpConfig,
    MetricConfig,
    NuisanceConfig,
    TokenDgpConfig,
    TrainingConfig,
)
from doublegen.constants import Stream
from doublegen.core import RngStream, partition_folds
from doublegen.synth import GaussConfounded, TokenConfounded


@pytest.fixture
def token_config() -> ExperimentConfig:
    """A desk-sized autoregressive experiment that trains in well under a second per cell."""
    return ExperimentConfig(
        dgp=TokenDgpConfig(),
        backend="autoreg",
        methods=["naive", "plugin", "ipw", "doublegen"],
        n=400,
        nuisance=NuisanceConfig(neighbors=5),
        training=TrainingConfig(iterations=60, mc_u=4, mc_report=8),
        metrics=MetricConfig(samples=500),
    )


@pytest.fixture
def flow_config() -> ExperimentConfig:
    return ExperimentConfig(
        dgp=GaussDgpConfig(),
        backend="flow",
        n=200,
        nuisance=NuisanceConfig(neighbors=5),
        training=TrainingConfig(epochs=2, batch_size=64, hidden=8, mc_u=2, mc_report=4),
        flow=FlowConfig(steps=10),
        metrics=MetricConfig(samples=200, bins=10, projections=8),
    )


@pytest.fixture
def diffusion_config(flow_config: ExperimentConfig) -> ExperimentConfig:
    return flow_config.model_copy(update={"backend": "diffusion", "diffusion": DiffusionConfig(steps=20)})


@pytest.fixture
def gauss_dgp() -> GaussConfounded:
    return GaussConfounded()


@pytest.fixture
def token_dgp() -> TokenConfounded:
    return TokenConfounded()


@pytest.fixture
def token_dataset(token_dgp):
    return token_dgp.sample_observational(400, RngStream(0, Stream.DATA))


@pytest.fixture
def token_folded(token_dataset):
    return partition_folds(token_dataset, RngStream(0, Stream.FOLDS))


@pytest.fixture
def gauss_dataset(gauss_dgp):
    return gauss_dgp.sample_observational(200, RngStream(0, Stream.DATA))


@pytest.fixture
def write_config(tmp_path: Path):
    """Write a config document to disk and return its path."""

    def _write(config: ExperimentConfig | dict, name: str = "config.json") -> Path:
        path = tmp_path / name
        if isinstance(config, ExperimentConfig):
            path.write_text(config.model_dump_json())
        else:
            path.write_text(json.dumps(config))
        return path

    return _write


@pytest.fixture
def mock_context():
    """Create a mock FastMCP Context for testing."""
    ctx = MagicMock(spec=Context)
    ctx.info = AsyncMock()
    ctx.debug = AsyncMock()
    ctx.error = AsyncMock()
    ctx.warning = AsyncMock()
    return ctx


@pytest.fixture
def numeric_rng() -> np.random.Generator:
    return np.random.default_rng(1234)
