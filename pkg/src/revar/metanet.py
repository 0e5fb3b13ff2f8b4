"""Weight networks mapping an instance (or its loss) to a weight in (0, 1)."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from revar import nets

CONDITIONINGS = ("instance", "loss_scalar")

_HI = np.nextafter(1.0, 0.0)
_LO = np.finfo(float).tiny


@dataclass
class MetaNet:
    net: nets.NetParams
    conditioning: str = "instance"

    def __post_init__(self):
        if self.conditioning not in CONDITIONINGS:
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if self.net.output_kind != "sigmoid" or self.net.n_out != 1:
            raise ValueError("meta-network needs a scalar sigmoid head")
        if self.conditioning == "loss_scalar" and self.net.n_in != 1:
            raise ValueError("loss-conditioned meta-network takes a single input")

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def with_params(self, params) -> "MetaNet":
        return replace(self, net=self.net.with_params(params))

    def copy(self) -> "MetaNet":
        return self.with_params(self.net.params)


def init_metanet(
    n_in: int,
    rng: np.random.Generator,
    hidden: Sequence[int] = (32, 32),
    conditioning: str = "instance",
    zero_last: bool = True,
) -> MetaNet:
    """Fresh meta-network; a zero output layer makes every initial weight 0.5."""
    if conditioning == "loss_scalar":
        n_in = 1
    net = nets.init_net((n_in, *hidden, 1), rng, output_kind="sigmoid", zero_last=zero_last)
    return MetaNet(net, conditioning)


def _forward(meta: MetaNet, inputs):
    X = np.asarray(inputs, dtype=float)
    if meta.conditioning == "loss_scalar":
        X = X.reshape(-1, 1)
    out, cache = nets.forward_batch(meta.net, X)
    return np.clip(out[:, 0], _LO, _HI), cache


def weights(meta: MetaNet, inputs) -> np.ndarray:
    """Weights for a batch of inputs (rows of features, or a vector of losses)."""
    return _forward(meta, inputs)[0]


def weight_of(meta: MetaNet, x) -> float:
    x = np.asarray(x, dtype=float)
    if meta.conditioning == "instance" and x.ndim != 1:
        raise ValueError("weight_of takes a single input vector")
    return float(weights(meta, x.reshape(1, -1) if meta.conditioning == "instance" else x.reshape(1))[0])


def weights_vjp(meta: MetaNet, inputs, cotangent) -> np.ndarray:
    """``sum_i cotangent_i * grad_Theta g(input_i)`` in one backward pass."""
    w, cache = _forward(meta, inputs)
    d = (np.asarray(cotangent, dtype=float) * w * (1.0 - w)).reshape(-1, 1)
    return nets.backward(meta.net, cache, d)


def grad_weight(meta: MetaNet, x) -> np.ndarray:
    """Exact gradient of ``weight_of(meta, x)`` w.r.t. the flat meta parameters."""
    x = np.asarray(x, dtype=float)
    inputs = x.reshape(1, -1) if meta.conditioning == "instance" else x.reshape(1)
    return weights_vjp(meta, inputs, np.ones(1))


def meta_inputs(meta: MetaNet, X, train_losses) -> np.ndarray:
    """What the meta-network consumes: features for ``instance``, detached losses otherwise."""
    if meta.conditioning == "loss_scalar":
        return np.asarray(train_losses, dtype=float).reshape(-1)
    return np.asarray(X, dtype=float)
