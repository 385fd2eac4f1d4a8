"""Experiment configuration: one JSON document, validated with pydantic, with every default materialized on disk."""

from __future__ import annotations

import math
from enum import Enum
from pathlib import Path
from typing import Annotated, Literal

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from doublegen.constants import A_STAR_DEFAULT, CLIP_DEFAULT, MC_U_REPORT, MC_U_TRAIN
from doublegen.exceptions import ConfigError
from doublegen.risk import Method


class Scenario(str, Enum):
    BOTH_RIGHT = "both_right"
    OUTCOME_WRONG = "outcome_wrong"
    PROPENSITY_WRONG = "propensity_wrong"
    BOTH_WRONG = "both_wrong"

    @property
    def propensity_wrong(self) -> bool:
        return self in (Scenario.PROPENSITY_WRONG, Scenario.BOTH_WRONG)

    @property
    def outcome_wrong(self) -> bool:
        return self in (Scenario.OUTCOME_WRONG, Scenario.BOTH_WRONG)


BACKEND_OUTCOMES = {"flow": "gauss", "diffusion": "gauss", "autoreg": "token"}


# ---------------------------------------------------------------------------
# Data-generating processes
# ---------------------------------------------------------------------------


class GaussDgpConfig(BaseModel):
    """Uniform features, logistic propensity, linear-Gaussian treated outcomes, shifted contaminant."""

    kind: Literal["gauss"] = "gauss"
    p: int = Field(default=2, ge=1)
    propensity_intercept: float = -1.0
    propensity_slope: list[float] = Field(default_factory=lambda: [2.5, 0.0])
    propensity_floor: float = Field(default=0.05, gt=0.0, lt=0.5)
    outcome_intercept: float = 1.0
    outcome_slope: list[float] = Field(default_factory=lambda: [3.0, -1.0])
    outcome_sd: float = Field(default=0.5, gt=0.0)
    contaminant_shift: float = 4.0
    dim: int = Field(default=1, ge=1)
    quadrature_nodes: int = Field(default=16, ge=1, le=64)

    @model_validator(mode="after")
    def validate_slopes(self) -> GaussDgpConfig:
        for name in ("propensity_slope", "outcome_slope"):
            if len(getattr(self, name)) != self.p:
                raise ValueError(f"{name} needs one entry per feature (p={self.p})")
        return self


class TokenDgpConfig(BaseModel):
    """Binary feature, per-feature next-token tables; ``content[x][j]`` is the chance position j does not end."""

    kind: Literal["token"] = "token"
    k: int = Field(default=3, ge=3)
    d: int = Field(default=3, ge=1)
    feature_share: float = Field(default=0.5, gt=0.0, lt=1.0)
    propensity: tuple[float, float] = (0.2, 0.8)
    content: tuple[list[float], list[float]] = ([0.3, 0.35, 0.4], [0.85, 0.8, 0.75])

    @field_validator("propensity")
    def validate_propensity(cls, v: tuple[float, float]) -> tuple[float, float]:
        if not all(0.0 < p < 1.0 for p in v):
            raise ValueError("propensities must lie strictly inside (0, 1) for positivity")
        return v

    @model_validator(mode="after")
    def validate_tables(self) -> TokenDgpConfig:
        for row in self.content:
            if len(row) != self.d:
                raise ValueError(f"content probabilities need one entry per position (d={self.d})")
            if not all(0.0 <= p <= 1.0 for p in row):
                raise ValueError("content probabilities must lie in [0, 1]")
        return self


DgpConfig = Annotated[GaussDgpConfig | TokenDgpConfig, Field(discriminator="kind")]


# ---------------------------------------------------------------------------
# Estimation and training
# ---------------------------------------------------------------------------


class NuisanceConfig(BaseModel):
    neighbors: int = Field(default=50, ge=1)
    clip: float = Field(default=CLIP_DEFAULT, ge=1.0)
    max_iter: int = Field(default=1000, ge=1)
    right: Literal["fitted", "oracle"] = "fitted"
    propensity_misspec: Literal["drop_features", "downweight"] = "drop_features"
    dropped_features: list[int] = Field(default_factory=lambda: [0])
    outcome_misspec: Literal["subset", "ignore_features"] = "subset"
    kept_features: list[int] = Field(default_factory=list)
    threshold_feature: int = Field(default=0, ge=0)
    threshold: float = 0.5
    downweight_factor: float = Field(default=4.0, gt=0.0)


class TrainingConfig(BaseModel):
    epochs: int = Field(default=50, ge=0)
    batch_size: int = Field(default=256, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    hidden: int = Field(default=64, ge=1)
    mc_u: int = Field(default=MC_U_TRAIN, ge=1)
    mc_report: int = Field(default=MC_U_REPORT, ge=1)
    iterations: int = Field(default=500, ge=0)
    tabular_learning_rate: float = Field(default=0.05, gt=0.0)


class FlowConfig(BaseModel):
    steps: int = Field(default=100, ge=1)
    mc_tu: int = Field(default=1, ge=1)


class DiffusionConfig(BaseModel):
    beta: float = Field(default=1.0, gt=0.0)
    t_min: float = Field(default=1e-3, gt=0.0)
    t_max: float = Field(default=3.0, gt=0.0)
    steps: int = Field(default=200, ge=1)
    mc: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def validate_horizon(self) -> DiffusionConfig:
        if self.t_min >= self.t_max:
            raise ValueError("t_min must be below t_max")
        if math.exp(-self.beta * self.t_max) > 0.05:
            raise ValueError("the forward process must nearly forget its start: exp(-beta * t_max) <= 0.05")
        return self


class MetricConfig(BaseModel):
    samples: int = Field(default=10_000, ge=1)
    bins: int = Field(default=50, ge=1)
    projections: int = Field(default=64, ge=1)
    generalization: bool = False


class ExperimentConfig(BaseModel):
    dgp: DgpConfig = Field(default_factory=GaussDgpConfig)
    backend: Literal["flow", "diffusion", "autoreg"] = "diffusion"
    methods: list[Method] = Field(default_factory=lambda: [Method.NAIVE, Method.PLUGIN, Method.IPW, Method.DOUBLEGEN])
    scenarios: list[Scenario] = Field(default_factory=lambda: [Scenario.BOTH_RIGHT])
    n: int = Field(default=2000, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0])
    a_star: int = A_STAR_DEFAULT
    n_jobs: int = 1
    nuisance: NuisanceConfig = Field(default_factory=NuisanceConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    metrics: MetricConfig = Field(default_factory=MetricConfig)

    @field_validator("seeds")
    def validate_seeds(cls, v: list[int]) -> list[int]:
        if not v:
            raise ValueError("at least one seed is required")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    @field_validator("n_jobs")
    def validate_n_jobs(cls, v: int) -> int:
        if v == 0 or v < -1:
            raise ValueError("n_jobs must be a positive worker count or -1 for every core")
        return v

    @field_validator("methods", "scenarios")
    def validate_unique(cls, v: list) -> list:
        if not v:
            raise ValueError("the grid needs at least one entry per axis")
        if len(set(v)) != len(v):
            raise ValueError("grid entries must be distinct")
        return v

    @model_validator(mode="after")
    def validate_backend(self) -> ExperimentConfig:
        expected = BACKEND_OUTCOMES[self.backend]
        if self.dgp.kind != expected:
            raise ValueError(f"backend {self.backend!r} needs a {expected!r} data-generating process")
        p = self.dgp.p if isinstance(self.dgp, GaussDgpConfig) else 1
        features = [*self.nuisance.dropped_features, *self.nuisance.kept_features, self.nuisance.threshold_feature]
        if any(f < 0 or f >= p for f in features):
            raise ValueError(f"nuisance feature indices must lie in [0, {p})")
        return self

    def with_overrides(self, seed: int | None = None, threads: int | None = None) -> ExperimentConfig:
        update: dict = {}
        if seed is not None:
            update["seeds"] = [seed]
        if threads is not None:
            update["n_jobs"] = threads
        if not update:
            return self.model_copy()
        try:
            return ExperimentConfig.model_validate({**self.model_dump(), **update})
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Path | str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def write_resolved(config: ExperimentConfig, out: Path) -> Path:
    target = out / "config.resolved.json"
    target.write_text(config.model_dump_json(indent=2) + "\n")
    return target
