"""Minibatch stochastic-gradient training of network hypotheses against a risk objective."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np

from doublegen.core import RngStream
from doublegen.exceptions import NumericalError
from doublegen.nn import OptimizerState, Params, adam_step

logger = logging.getLogger("doublegen.training")


class Objective(Protocol):
    @property
    def size(self) -> int: ...

    def value(self, theta: Any, rng: RngStream) -> float: ...

    def sample_gradient(self, theta: Any, rng: RngStream, batch: int) -> Params: ...


@dataclass(frozen=True)
class NetworkFit:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3


def fit_network(objective: Objective, config: NetworkFit, rng: RngStream, theta: Any) -> tuple[Any, list[float]]:
    """Adam on unbiased sampled gradients; one epoch is ``ceil(size / batch_size)`` steps.

    Returns the final hypothesis and the risk measured after each epoch.
    """
    state = OptimizerState.fresh(theta.parameters(), learning_rate=config.learning_rate)
    steps = max(1, math.ceil(objective.size / config.batch_size))
    history: list[float] = []
    for epoch in range(config.epochs):
        for step in range(steps):
            grads = objective.sample_gradient(theta, rng.child(epoch, step), config.batch_size)
            params, state = adam_step(theta.parameters(), grads, state)
            theta = theta.with_parameters(params)
        risk = objective.value(theta, rng.child(epoch, steps))
        if not np.isfinite(risk):
            raise NumericalError(f"risk diverged at epoch {epoch}")
        history.append(risk)
        logger.debug("epoch %d risk %.6f", epoch, risk)
    return theta, history
