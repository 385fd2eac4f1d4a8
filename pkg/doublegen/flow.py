"""Flow-matching backend: velocity regression along the linear noise-to-data path and RK4 transport."""

from __future__ import annotations

import logging
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

logger = logging.getLogger("doublegen.flow")


class VectorField(TimeConditionedMlp):
    kind: ClassVar[str] = "vector_field"


@dataclass(frozen=True)
class GaussianInterpolationField:
    """Exact conditional velocity E[Y - U | (1 - t) U + t Y = z] for a Gaussian-mixture target and U ~ N(0, I)."""

    law: GaussianMixture

    @property
    def dim(self) -> int:
        return self.law.dim

    def __call__(self, z: np.ndarray, t: np.ndarray | float) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(z),))[:, None]
        s2 = self.law.sd**2
        variance = (1 - t) ** 2 + t**2 * s2
        gain = (t * s2 - (1 - t)) / variance
        centers = t[:, :, None] * self.law.means[None, :, :]
        weights = self.law.responsibilities(z, centers, variance)
        per_component = self.law.means[None, :, :] + gain[:, :, None] * (z[:, None, :] - centers)
        return np.einsum("bk,bkd->bd", weights, per_component)


def _draw_path(y: np.ndarray, rng: RngStream, mc_tu: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = rng.uniform((len(y), mc_tu))
    noise = rng.normal((len(y), mc_tu, y.shape[1]))
    z = (1 - t)[:, :, None] * noise + t[:, :, None] * y[:, None, :]
    return t, noise, z


def _residuals(theta: Any, y: np.ndarray, rng: RngStream, mc_tu: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[1] != theta.dim:
        raise DataError(f"outcome dimension {y.shape[1]} != field dimension {theta.dim}")
    t, noise, z = _draw_path(y, rng, mc_tu)
    d = y.shape[1]
    velocity = theta(z.reshape(-1, d), t.reshape(-1)).reshape(len(y), mc_tu, d)
    return y[:, None, :] - noise - velocity, z, t


def flow_losses(theta: Any, y: np.ndarray, rng: RngStream, mc_tu: int = 1) -> np.ndarray:
    """Per-outcome Monte Carlo estimate over ``mc_tu`` joint draws of (t, U)."""
    residual, _, _ = _residuals(theta, y, rng, mc_tu)
    return np.mean(np.sum(residual**2, axis=2), axis=1)


def flow_loss(theta: Any, y: np.ndarray, rng: RngStream, mc_tu: int = 1) -> float:
    return float(flow_losses(theta, np.asarray(y, dtype=float)[None, :], rng, mc_tu)[0])


class FlowLoss:
    name = "flow_matching"

    def __init__(self, mc_tu: int = 1) -> None:
        if mc_tu < 1:
            raise DataError("mc_tu must be at least 1")
        self.mc_tu = mc_tu

    def losses(self, theta: Any, outcomes: np.ndarray, rng: RngStream | None = None) -> np.ndarray:
        return flow_losses(theta, outcomes, rng or RngStream(0), self.mc_tu)

    def weighted_gradient(
        self, theta: VectorField, outcomes: np.ndarray, weights: np.ndarray, rng: RngStream | None = None
    ) -> Params:
        residual, z, t = _residuals(theta, outcomes, rng or RngStream(0), self.mc_tu)
        cotangent = -2.0 * residual * (np.asarray(weights, dtype=float)[:, None, None] / self.mc_tu)
        d = residual.shape[2]
        return theta.backward(z.reshape(-1, d), t.reshape(-1), cotangent.reshape(-1, d))


def flow_sample(theta: Any, u: np.ndarray, steps: int) -> np.ndarray:
    """Classical RK4 on dy/dt = theta(y, t) from t = 0 to 1 with ``steps`` uniform steps."""
    if steps < 1:
        raise DataError("steps must be at least 1")
    u = np.asarray(u, dtype=float)
    y = np.atleast_2d(u).copy()
    h = 1.0 / steps
    for i in range(steps):
        t = i * h
        k1 = theta(y, t)
        k2 = theta(y + 0.5 * h * k1, t + 0.5 * h)
        k3 = theta(y + 0.5 * h * k2, t + 0.5 * h)
        k4 = theta(y + h * k3, t + h)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NumericalError("ODE diverged")
    return y[0] if u.ndim == 1 else y


class FlowBackend:
    name = "flow"
    outcome_kind = OutcomeKind.REAL

    def __init__(self, dim: int, hidden: int = 64, steps: int = 100, mc_tu: int = 1, fit: NetworkFit | None = None):
        self.dim = dim
        self.hidden = hidden
        self.steps = steps
        self.fit = fit or NetworkFit()
        self.loss = FlowLoss(mc_tu)

    def settings(self) -> dict[str, Any]:
        return {"dim": self.dim, "hidden": self.hidden, "steps": self.steps, "mc_tu": self.loss.mc_tu}

    def init_hypothesis(self, rng: RngStream) -> VectorField:
        return VectorField.create(self.dim, self.hidden, rng)

    def reference(self, dgp: Any) -> GaussianInterpolationField:
        law = getattr(dgp, "counterfactual_law", None)
        if law is None:
            raise ReferenceUnavailableError()
        return GaussianInterpolationField(law())

    def train(
        self, objective: RiskObjective, theta: VectorField, rng: RngStream
    ) -> tuple[VectorField, list[float]]:
        return fit_network(objective, self.fit, rng, theta)

    def sample(self, theta: Any, count: int, rng: RngStream) -> np.ndarray:
        if count == 0:
            return np.zeros((0, self.dim))
        return flow_sample(theta, rng.normal((count, self.dim)), self.steps)

    def load(self, data: dict[str, Any]) -> VectorField:
        return VectorField.from_dict(data)
