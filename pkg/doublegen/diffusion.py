"""Diffusion backend on a constant-rate variance-preserving SDE."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, ClassVar

import numpy as np

from doublegen.core import OutcomeKind, RngStream
from doublegen.exceptions import DataError, NumericalError, ReferenceUnavailableError
from doublegen.nn import Params, TimeConditionedMlp
from doublegen.training import NetworkFit, fit_network

if TYPE_CHECKING:
    from doublegen.risk import RiskObjective
    from doublegen.synth import GaussianMixture

logger = logging.getLogger("doublegen.diffusion")


@dataclass(frozen=True)
class NoiseSchedule:
    beta: float = 1.0
    t_min: float = 1e-3
    t_max: float = 3.0

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise DataError("beta must be positive")
        if not 0 <= self.t_min < self.t_max:
            raise DataError(f"need 0 <= t_min < t_max, got ({self.t_min}, {self.t_max})")
        if math.exp(-self.beta * self.t_max) > 0.05:
            raise DataError("t_max too short: the forward process has not forgotten its start")


def schedule_at(sched: NoiseSchedule, t: np.ndarray | float) -> tuple[np.ndarray, np.ndarray]:
    """(mu_t, sigma_t) with mu_t = exp(-beta t) and sigma_t^2 = 1 - mu_t^2."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > sched.t_max):
        raise DataError(f"time outside [0, {sched.t_max}]")
    mu = np.exp(-sched.beta * t)
    return mu, np.sqrt(-np.expm1(-2 * sched.beta * t))


def forward_noise(sched: NoiseSchedule, y0: np.ndarray, t: np.ndarray | float, rng: RngStream) -> np.ndarray:
    y0 = np.asarray(y0, dtype=float)
    mu, sigma = schedule_at(sched, t)
    mu, sigma = np.expand_dims(mu, -1) if mu.ndim else mu, np.expand_dims(sigma, -1) if sigma.ndim else sigma
    return mu * y0 + sigma * rng.normal(y0.shape)


class ScoreNet(TimeConditionedMlp):
    kind: ClassVar[str] = "score_net"


@dataclass(frozen=True)
class GaussianMixtureScore:
    """Score of the time-t forward marginal of a Gaussian-mixture start."""

    law: GaussianMixture
    schedule: NoiseSchedule

    @property
    def dim(self) -> int:
        return self.law.dim

    def __call__(self, y: np.ndarray, t: np.ndarray | float) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        mu, sigma = schedule_at(self.schedule, np.broadcast_to(np.asarray(t, dtype=float), (len(y),)))
        variance = (mu**2 * self.law.sd**2 + sigma**2)[:, None]
        centers = mu[:, None, None] * self.law.means[None, :, :]
        weights = self.law.responsibilities(y, centers, variance)
        per_component = -(y[:, None, :] - centers) / variance[:, :, None]
        return np.einsum("bk,bkd->bd", weights, per_component)


def _residuals(
    theta: Any, sched: NoiseSchedule, y0: np.ndarray, rng: RngStream, mc: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    if y0.shape[1] != theta.dim:
        raise DataError(f"outcome dimension {y0.shape[1]} != score dimension {theta.dim}")
    if sched.t_min <= 0:
        raise NumericalError("score matching needs t_min > 0")
    b, d = y0.shape
    t = sched.t_min + (sched.t_max - sched.t_min) * rng.uniform((b, mc))
    eps = rng.normal((b, mc, d))
    mu, sigma = schedule_at(sched, t)
    y_t = mu[:, :, None] * y0[:, None, :] + sigma[:, :, None] * eps
    score = theta(y_t.reshape(-1, d), t.reshape(-1)).reshape(b, mc, d)
    return -eps / sigma[:, :, None] - score, y_t, t


def dsm_losses(theta: Any, sched: NoiseSchedule, y0: np.ndarray, rng: RngStream, mc: int = 1) -> np.ndarray:
    residual, _, _ = _residuals(theta, sched, y0, rng, mc)
    return (sched.t_max - sched.t_min) * np.mean(np.sum(residual**2, axis=2), axis=1)


def dsm_loss(theta: Any, sched: NoiseSchedule, y0: np.ndarray, rng: RngStream, mc: int = 1) -> float:
    if mc < 1:
        raise DataError("mc must be at least 1")
    return float(dsm_losses(theta, sched, np.asarray(y0, dtype=float)[None, :], rng, mc)[0])


class DsmLoss:
    name = "denoising_score_matching"

    def __init__(self, schedule: NoiseSchedule, mc: int = 1) -> None:
        if mc < 1:
            raise DataError("mc must be at least 1")
        self.schedule = schedule
        self.mc = mc

    def losses(self, theta: Any, outcomes: np.ndarray, rng: RngStream | None = None) -> np.ndarray:
        return dsm_losses(theta, self.schedule, outcomes, rng or RngStream(0), self.mc)

    def weighted_gradient(
        self, theta: ScoreNet, outcomes: np.ndarray, weights: np.ndarray, rng: RngStream | None = None
    ) -> Params:
        residual, y_t, t = _residuals(theta, self.schedule, outcomes, rng or RngStream(0), self.mc)
        span = self.schedule.t_max - self.schedule.t_min
        cotangent = -2.0 * span * residual * (np.asarray(weights, dtype=float)[:, None, None] / self.mc)
        d = residual.shape[2]
        return theta.backward(y_t.reshape(-1, d), t.reshape(-1), cotangent.reshape(-1, d))


def diffusion_sample(
    theta: Any, sched: NoiseSchedule, rng: RngStream, steps: int, count: int | None = None
) -> np.ndarray:
    """Euler-Maruyama on the reverse-time SDE from t_max down to t_min; returns the state at t_min.

    The start noise and then one Gaussian block per step are drawn in that order, so two
    hypotheses sampled with the same stream share their noise path.
    """
    if steps < 1:
        raise DataError("steps must be at least 1")
    rows = 1 if count is None else count
    y = rng.normal((rows, theta.dim))
    h = (sched.t_max - sched.t_min) / steps
    for i in range(steps):
        t = sched.t_max - i * h
        drift = sched.beta * (y + 2.0 * theta(y, t))
        y = y + drift * h + math.sqrt(2.0 * sched.beta * h) * rng.normal((rows, theta.dim))
        if not np.all(np.isfinite(y)):
            raise NumericalError("SDE diverged")
    return y[0] if count is None else y


class DiffusionBackend:
    name = "diffusion"
    outcome_kind = OutcomeKind.REAL

    def __init__(
        self,
        dim: int,
        schedule: NoiseSchedule | None = None,
        hidden: int = 64,
        steps: int = 200,
        mc: int = 1,
        fit: NetworkFit | None = None,
    ) -> None:
        self.dim = dim
        self.schedule = schedule or NoiseSchedule()
        self.hidden = hidden
        self.steps = steps
        self.fit = fit or NetworkFit()
        self.loss = DsmLoss(self.schedule, mc)

    def settings(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "hidden": self.hidden,
            "steps": self.steps,
            "mc": self.loss.mc,
            "beta": self.schedule.beta,
            "t_min": self.schedule.t_min,
            "t_max": self.schedule.t_max,
        }

    def init_hypothesis(self, rng: RngStream) -> ScoreNet:
        return ScoreNet.create(self.dim, self.hidden, rng)

    def reference(self, dgp: Any) -> GaussianMixtureScore:
        law = getattr(dgp, "counterfactual_law", None)
        if law is None:
            raise ReferenceUnavailableError()
        return GaussianMixtureScore(law(), self.schedule)

    def train(self, objective: RiskObjective, theta: ScoreNet, rng: RngStream) -> tuple[ScoreNet, list[float]]:
        return fit_network(objective, self.fit, rng, theta)

    def sample(self, theta: Any, count: int, rng: RngStream) -> np.ndarray:
        if count == 0:
            return np.zeros((0, self.dim))
        return diffusion_sample(theta, self.schedule, rng, self.steps, count)

    def load(self, data: dict[str, Any]) -> ScoreNet:
        return ScoreNet.from_dict(data)
