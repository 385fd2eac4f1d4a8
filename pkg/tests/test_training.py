from dataclasses import dataclass

import numpy as np
import pytest

from doublegen.core import RngStream
from doublegen.exceptions import NumericalError
from doublegen.training import NetworkFit, fit_network


@dataclass(frozen=True)
class Point:
    coords: np.ndarray

    def parameters(self) -> list[np.ndarray]:
        return [self.coords]

    def with_parameters(self, params: list[np.ndarray]) -> "Point":
        return Point(params[0])


class NoisyQuadratic:
    """Risk |theta - target|^2 with unbiased noisy gradients."""

    size = 10

    def __init__(self, target: np.ndarray, risk_offset: float = 0.0) -> None:
        self.target = target
        self.risk_offset = risk_offset

    def value(self, theta: Point, rng: RngStream) -> float:
        return float(np.sum((theta.coords - self.target) ** 2)) + self.risk_offset

    def sample_gradient(self, theta: Point, rng: RngStream, batch: int) -> list[np.ndarray]:
        noise = rng.normal(self.target.shape) / np.sqrt(batch)
        return [2.0 * (theta.coords - self.target) + 0.1 * noise]


def test_fit_network_descends():
    objective = NoisyQuadratic(np.array([1.0, -2.0]))
    config = NetworkFit(epochs=40, batch_size=4, learning_rate=0.1)

    theta, history = fit_network(objective, config, RngStream(0), Point(np.zeros(2)))

    assert len(history) == 40
    assert history[-1] < history[0]
    assert theta.coords == pytest.approx([1.0, -2.0], abs=0.2)


def test_fit_network_is_reproducible():
    objective = NoisyQuadratic(np.array([0.5]))
    config = NetworkFit(epochs=3, batch_size=5)

    first, _ = fit_network(objective, config, RngStream(7), Point(np.zeros(1)))
    second, _ = fit_network(objective, config, RngStream(7), Point(np.zeros(1)))

    assert np.array_equal(first.coords, second.coords)


def test_fit_network_stops_on_diverged_risk():
    objective = NoisyQuadratic(np.zeros(1), risk_offset=np.inf)

    with pytest.raises(NumericalError, match="risk diverged at epoch 0"):
        fit_network(objective, NetworkFit(epochs=2), RngStream(0), Point(np.zeros(1)))


def test_zero_epochs_returns_the_initial_hypothesis():
    start = Point(np.array([3.0]))

    theta, history = fit_network(NoisyQuadratic(np.zeros(1)), NetworkFit(epochs=0), RngStream(0), start)

    assert theta is start
    assert history == []
