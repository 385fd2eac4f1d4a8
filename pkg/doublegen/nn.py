"""Fixed-architecture two-hidden-layer tanh network with hand-derived reverse-mode gradients and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, ClassVar

import numpy as np

from doublegen.core import RngStream
from doublegen.exceptions import DataError, NumericalError

Params = list[np.ndarray]


@dataclass(frozen=True)
class Mlp:
    """``params`` is ``[W1, b1, W2, b2, W3, b3]``; tanh on both hidden layers, identity on the output."""

    params: Params

    def __post_init__(self) -> None:
        if len(self.params) != 6:
            raise DataError("an Mlp has exactly three weight matrices and three bias vectors")
        for w, b in zip(self.params[::2], self.params[1::2]):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DataError(f"inconsistent layer shapes {w.shape} / {b.shape}")
        for (w_in, _), (w_out, _) in zip(self.layers[:-1], self.layers[1:]):
            if w_in.shape[1] != w_out.shape[0]:
                raise DataError("consecutive layers do not chain")

    @classmethod
    def init(cls, widths: tuple[int, int, int, int], rng: RngStream, output_scale: float = 1.0) -> Mlp:
        m, h1, h2, q = widths
        params: Params = []
        for fan_in, fan_out in ((m, h1), (h1, h2), (h2, q)):
            params.append(rng.normal((fan_in, fan_out)) / np.sqrt(fan_in))
            params.append(np.zeros(fan_out))
        params[4] = params[4] * output_scale
        return cls(params=params)

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.params[i], self.params[i + 1]) for i in range(0, 6, 2)]

    @property
    def widths(self) -> tuple[int, int, int, int]:
        w1, w2, w3 = self.params[0], self.params[2], self.params[4]
        return (w1.shape[0], w1.shape[1], w2.shape[1], w3.shape[1])

    def to_dict(self) -> dict[str, Any]:
        return {
            "widths": list(self.widths),
            "weights": [w.tolist() for w, _ in self.layers],
            "biases": [b.tolist() for _, b in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Mlp:
        params: Params = []
        for w, b in zip(data["weights"], data["biases"]):
            params.append(np.asarray(w, dtype=float))
            params.append(np.asarray(b, dtype=float))
        net = cls(params=params)
        if list(net.widths) != list(data["widths"]):
            raise DataError(f"stored widths {data['widths']} do not match weights {net.widths}")
        return net


def _as_batch(net: Mlp, inputs: np.ndarray) -> np.ndarray:
    batch = np.atleast_2d(np.asarray(inputs, dtype=float))
    if batch.shape[1] != net.widths[0]:
        raise DataError(f"input dimension {batch.shape[1]} != network input width {net.widths[0]}")
    return batch


def _hidden(net: Mlp, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w1, b1, w2, b2 = net.params[:4]
    h1 = np.tanh(batch @ w1 + b1)
    h2 = np.tanh(h1 @ w2 + b2)
    return h1, h2


def forward(net: Mlp, inputs: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector ``(m,)`` or a batch ``(B, m)``."""
    batch = _as_batch(net, inputs)
    _, h2 = _hidden(net, batch)
    out = h2 @ net.params[4] + net.params[5]
    return out[0] if np.ndim(inputs) == 1 else out


def backward(net: Mlp, inputs: np.ndarray, output_cotangent: np.ndarray) -> tuple[Params, np.ndarray]:
    """Reverse-mode pass: returns parameter gradients (summed over the batch) and the input gradient."""
    batch = _as_batch(net, inputs)
    cot = np.atleast_2d(np.asarray(output_cotangent, dtype=float))
    if cot.shape != (batch.shape[0], net.widths[3]):
        raise DataError(f"cotangent shape {cot.shape} does not match output shape {(batch.shape[0], net.widths[3])}")
    w1, _, w2, _, w3, _ = net.params
    h1, h2 = _hidden(net, batch)

    grad_w3 = h2.T @ cot
    grad_b3 = cot.sum(axis=0)
    delta2 = (cot @ w3.T) * (1.0 - h2**2)
    grad_w2 = h1.T @ delta2
    grad_b2 = delta2.sum(axis=0)
    delta1 = (delta2 @ w2.T) * (1.0 - h1**2)
    grad_w1 = batch.T @ delta1
    grad_b1 = delta1.sum(axis=0)
    input_grad = delta1 @ w1.T

    grads = [grad_w1, grad_b1, grad_w2, grad_b2, grad_w3, grad_b3]
    return grads, input_grad[0] if np.ndim(inputs) == 1 else input_grad


@dataclass(frozen=True)
class OptimizerState:
    first_moment: Params
    second_moment: Params
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Params, **hyper: float) -> OptimizerState:
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **hyper,
        )


def adam_step(params: Params, grads: Params, state: OptimizerState) -> tuple[Params, OptimizerState]:
    if state.learning_rate <= 0:
        raise DataError("learning rate must be positive")
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise DataError("gradient shapes do not match parameter shapes")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericalError("diverged")

    step = state.step + 1
    first = [state.beta1 * m + (1 - state.beta1) * g for m, g in zip(state.first_moment, grads)]
    second = [state.beta2 * v + (1 - state.beta2) * g**2 for v, g in zip(state.second_moment, grads)]
    correction1 = 1 - state.beta1**step
    correction2 = 1 - state.beta2**step
    updated = [
        p - state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        for p, m, v in zip(params, first, second)
    ]
    return updated, replace(state, first_moment=first, second_moment=second, step=step)


def time_features(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    return np.hstack([t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)])


@dataclass(frozen=True)
class TimeConditionedMlp:
    """An Mlp over ``(y, t, sin 2 pi t, cos 2 pi t)`` returning a vector in the outcome space."""

    kind: ClassVar[str] = "time_conditioned"

    net: Mlp
    dim: int = field(default=1)

    def __post_init__(self) -> None:
        m, _, _, q = self.net.widths
        if m != self.dim + 3 or q != self.dim:
            raise DataError(f"network widths {self.net.widths} do not fit outcome dimension {self.dim}")

    @classmethod
    def create(cls, dim: int, hidden: int, rng: RngStream, output_scale: float = 1.0):
        return cls(net=Mlp.init((dim + 3, hidden, hidden, dim), rng, output_scale=output_scale), dim=dim)

    def _inputs(self, y: np.ndarray, t: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[1] != self.dim:
            raise DataError(f"outcome dimension {y.shape[1]} != {self.dim}")
        t = np.broadcast_to(np.asarray(t, dtype=float), (y.shape[0],))
        return np.hstack([y, time_features(t)])

    def __call__(self, y: np.ndarray, t: np.ndarray | float) -> np.ndarray:
        return forward(self.net, self._inputs(y, t))

    def backward(self, y: np.ndarray, t: np.ndarray, cotangent: np.ndarray) -> Params:
        grads, _ = backward(self.net, self._inputs(y, t), cotangent)
        return grads

    def parameters(self) -> Params:
        return self.net.params

    def with_parameters(self, params: Params):
        return replace(self, net=Mlp(params=list(params)))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "dim": self.dim, "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]):
        if data.get("kind") != cls.kind:
            raise DataError(f"expected a {cls.kind} model, got {data.get('kind')!r}")
        return cls(net=Mlp.from_dict(data["net"]), dim=int(data["dim"]))
