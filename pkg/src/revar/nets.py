"""Small feed-forward networks with hidden-unit dropout and exact backprop.

Parameters live in one flat float64 vector. The ordering is layer by layer,
and within a layer the weight matrix of shape ``(fan_in, fan_out)`` in
row-major order followed by the bias vector. Every gradient in the package
uses this ordering, so dot products between gradients of the same network
are meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

OUTPUT_KINDS = ("linear", "softmax", "sigmoid")


@dataclass
class NetParams:
    sizes: tuple
    params: np.ndarray
    output_kind: str = "linear"
    dropout_rate: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.sizes}")
        if self.output_kind not in OUTPUT_KINDS:
            raise ValueError(f"unknown output_kind {self.output_kind!r}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (n_params(self.sizes),):
            raise ValueError(
                f"parameter vector has shape {self.params.shape}, expected ({n_params(self.sizes)},)"
            )

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    @property
    def hidden(self) -> tuple:
        return self.sizes[1:-1]

    def layers(self) -> list:
        """Views ``(W, b)`` into the flat parameter vector."""
        out = []
        off = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = self.params[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = self.params[off : off + fan_out]
            off += fan_out
            out.append((W, b))
        return out

    def with_params(self, params: np.ndarray) -> "NetParams":
        return replace(self, params=np.array(params, dtype=float))

    def copy(self) -> "NetParams":
        return self.with_params(self.params)


@dataclass
class DropoutMask:
    """Binary keep-masks over hidden units, one array per hidden layer.

    Each array has shape ``(width,)`` (shared by a batch) or ``(n, width)``
    (one row per example).
    """

    layers: list = field(default_factory=list)
    keep_prob: float = 1.0


def n_params(sizes: Sequence[int]) -> int:
    return int(sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])))


def init_net(
    sizes: Sequence[int],
    rng: np.random.Generator,
    output_kind: str = "linear",
    dropout_rate: float = 0.0,
    zero_last: bool = False,
) -> NetParams:
    """He-uniform hidden layers, ``1/sqrt(fan_in)`` output layer, zero biases."""
    sizes = tuple(int(s) for s in sizes)
    chunks = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            W = np.zeros((fan_in, fan_out))
        else:
            bound = np.sqrt((1.0 if last else 6.0) / fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        chunks.append(W.ravel())
        chunks.append(np.zeros(fan_out))
    return NetParams(sizes, np.concatenate(chunks), output_kind, dropout_rate)


def sample_mask(net: NetParams, rng: np.random.Generator, n: Optional[int] = None) -> DropoutMask:
    """I.i.d. Bernoulli(1 - dropout_rate) keep-mask for every hidden unit.

    With ``n`` given, one independent mask row per example is drawn.
    """
    keep = 1.0 - net.dropout_rate
    shape = (lambda w: (w,)) if n is None else (lambda w: (int(n), w))
    layers = [(rng.random(shape(w)) < keep).astype(float) for w in net.hidden]
    return DropoutMask(layers, keep)


def ones_mask(net: NetParams) -> DropoutMask:
    return DropoutMask([np.ones(w) for w in net.hidden], 1.0)


def _as_batch(net: NetParams, x) -> np.ndarray:
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise ValueError(f"input has shape {np.shape(x)}, network expects {net.n_in} features")
    return X


def _mask_layers(net: NetParams, mask) -> Optional[list]:
    if mask is None:
        return None
    layers = mask.layers if isinstance(mask, DropoutMask) else list(mask)
    if len(layers) != len(net.hidden):
        raise ValueError(f"mask has {len(layers)} layers, network has {len(net.hidden)} hidden layers")
    for m, w in zip(layers, net.hidden):
        if np.shape(m)[-1] != w:
            raise ValueError(f"mask width {np.shape(m)[-1]} does not match hidden width {w}")
    return layers


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so neither branch overflows.
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_batch(net: NetParams, X, mask=None):
    """Forward pass over a batch.

    Returns ``(output, cache)`` where ``output`` is the head output (raw for
    linear, probabilities for softmax/sigmoid) and ``cache`` holds what
    :func:`backward` needs. Masked hidden units are zeroed with no rescaling.
    """
    X = _as_batch(net, X)
    masks = _mask_layers(net, mask)
    acts = [X]
    pre = []
    h = X
    layers = net.layers()
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        pre.append(z)
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0)
            if masks is not None:
                h = h * masks[i]
            acts.append(h)
    z = pre[-1]
    if net.output_kind == "softmax":
        out = softmax(z)
    elif net.output_kind == "sigmoid":
        out = sigmoid(z)
    else:
        out = z
    return out, {"acts": acts, "pre": pre, "masks": masks}


def forward(net: NetParams, x, mask=None) -> np.ndarray:
    out, _ = forward_batch(net, x, mask)
    return out[0] if np.ndim(x) == 1 else out


def backward(net: NetParams, cache: dict, d_logits: np.ndarray, per_example: bool = False) -> np.ndarray:
    """Backpropagate a cotangent on the head pre-activation.

    Returns the flat parameter gradient summed over the batch, or an
    ``(n, n_params)`` array of per-example gradients.
    """
    acts, pre, masks = cache["acts"], cache["pre"], cache["masks"]
    layers = net.layers()
    delta = np.asarray(d_logits, dtype=float).reshape(pre[-1].shape)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a = acts[i]
        if per_example:
            gW = (a[:, :, None] * delta[:, None, :]).reshape(a.shape[0], -1)
            grads[i] = np.concatenate([gW, delta], axis=1)
        else:
            grads[i] = np.concatenate([(a.T @ delta).ravel(), delta.sum(axis=0)])
        if i > 0:
            dh = delta @ W.T
            if masks is not None:
                dh = dh * masks[i - 1]
            delta = dh * (pre[i - 1] > 0)
    return np.concatenate(grads, axis=1 if per_example else 0)


def _labels(net: NetParams, y, n: int) -> np.ndarray:
    if net.output_kind == "softmax":
        y = np.asarray(y).reshape(-1)
        if y.shape[0] != n:
            raise ValueError(f"{y.shape[0]} labels for {n} inputs")
        yi = y.astype(int)
        if np.any(yi != y) or np.any(yi < 0) or np.any(yi >= net.n_out):
            raise ValueError(f"class index out of range [0, {net.n_out})")
        return yi
    y = np.asarray(y, dtype=float).reshape(n, -1)
    if y.shape[1] != net.n_out:
        raise ValueError(f"targets have {y.shape[1]} columns, network outputs {net.n_out}")
    return y


def losses_and_dlogits(net: NetParams, X, y, mask=None):
    """Per-example losses and their gradients w.r.t. the head pre-activation."""
    out, cache = forward_batch(net, X, mask)
    n = out.shape[0]
    y = _labels(net, y, n)
    if net.output_kind == "softmax":
        z = cache["pre"][-1]
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        losses = lse - z[np.arange(n), y]
        d = out.copy()
        d[np.arange(n), y] -= 1.0
    elif net.output_kind == "linear":
        r = out - y
        losses = 0.5 * np.sum(r * r, axis=1)
        d = r
    else:
        raise ValueError("loss is defined for linear and softmax heads only")
    return losses, d, cache


def losses(net: NetParams, X, y, mask=None) -> np.ndarray:
    return losses_and_dlogits(net, X, y, mask)[0]


def loss(net: NetParams, x, y) -> float:
    """Squared error ``0.5 (f(x) - y)^2`` or cross-entropy ``-log p_y``."""
    X = _as_batch(net, x)
    return float(losses(net, X, np.reshape(y, (1, -1)) if net.output_kind == "linear" else np.reshape(y, -1))[0])


def batch_grad(net: NetParams, X, y, weights=None, per_example: bool = False, mask=None):
    """Gradient of ``sum_i w_i * loss_i``; per-example rows when requested."""
    ls, d, cache = losses_and_dlogits(net, X, y, mask)
    if weights is not None:
        d = d * np.asarray(weights, dtype=float).reshape(-1, 1)
    return ls, backward(net, cache, d, per_example=per_example)


def grad(net: NetParams, x, y, scale: float = 1.0) -> np.ndarray:
    """Exact gradient of ``scale * loss(net, x, y)`` w.r.t. the flat parameters."""
    X = _as_batch(net, x)
    yy = np.reshape(y, (1, -1)) if net.output_kind == "linear" else np.reshape(y, -1)
    return batch_grad(net, X, yy, weights=[scale])[1]


def to_dict(net: NetParams) -> dict:
    return {
        "sizes": list(net.sizes),
        "output_kind": net.output_kind,
        "activation": net.activation,
        "dropout_rate": net.dropout_rate,
        "layers": [
            {"weight_shape": list(W.shape), "weight": W.ravel().tolist(), "bias": b.tolist()}
            for W, b in net.layers()
        ],
    }


def from_dict(d: dict) -> NetParams:
    chunks = []
    for layer in d["layers"]:
        chunks.append(np.asarray(layer["weight"], dtype=float))
        chunks.append(np.asarray(layer["bias"], dtype=float))
    return NetParams(
        tuple(d["sizes"]),
        np.concatenate(chunks),
        d["output_kind"],
        float(d["dropout_rate"]),
        d.get("activation", "relu"),
    )


def save(net: NetParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(net), fh)


def load(path) -> NetParams:
    with open(path, encoding="utf-8") as fh:
        return from_dict(json.load(fh))
