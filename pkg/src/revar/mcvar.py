"""Monte-Carlo dropout: predictive samples, the variance penalty and meta-losses.

Batched routines lay out the ``K`` stochastic passes example-major: row
``j * K + k`` of a tiled batch is pass ``k`` of example ``j``, and every mask
array has one row per tiled example.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from revar import nets


@dataclass(frozen=True)
class McConfig:
    k_samples: int = 10
    dropout_rate: float = 0.2
    reg_weight: float = 1.0

    def __post_init__(self):
        if int(self.k_samples) < 2:
            raise ValueError(f"k_samples must be >= 2, got {self.k_samples}")
        if not 0.0 < self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in (0, 1), got {self.dropout_rate}")
        if self.reg_weight < 0:
            raise ValueError(f"reg_weight must be >= 0, got {self.reg_weight}")


def sample_mc_masks(net: nets.NetParams, n: int, cfg: McConfig, rng: np.random.Generator) -> nets.DropoutMask:
    """Independent masks for ``n`` examples times ``K`` passes."""
    keep = 1.0 - cfg.dropout_rate
    layers = [(rng.random((n * cfg.k_samples, w)) < keep).astype(float) for w in net.hidden]
    return nets.DropoutMask(layers, keep)


def _tile(X: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(X, k, axis=0)


def _batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[None, :] if X.ndim == 1 else X


def mc_outputs_batch(net, X, cfg: McConfig, rng=None, masks=None) -> np.ndarray:
    """Outputs of shape ``(n, K, n_out)``; softmax heads give probabilities."""
    X = _batch(X)
    n = X.shape[0]
    if masks is None:
        masks = sample_mc_masks(net, n, cfg, rng)
    out, _ = nets.forward_batch(net, _tile(X, cfg.k_samples), masks)
    return out.reshape(n, cfg.k_samples, -1)


def mc_outputs(net, x, cfg: McConfig, rng=None, masks=None) -> np.ndarray:
    """``K`` stochastic forward passes for a single input, shape ``(K, n_out)``."""
    return mc_outputs_batch(net, np.asarray(x, dtype=float).reshape(1, -1), cfg, rng, masks)[0]


def _deviations(outs: np.ndarray) -> np.ndarray:
    # Shift by the first pass so identical passes give exactly zero.
    shifted = outs - outs[:, :1]
    return shifted - shifted.mean(axis=1, keepdims=True)


def _variance(outs: np.ndarray) -> np.ndarray:
    dev = _deviations(outs)
    return np.sum(dev * dev, axis=(1, 2)) / outs.shape[1]


def dropout_variances(net, X, cfg: McConfig, rng=None, masks=None) -> np.ndarray:
    return _variance(mc_outputs_batch(net, X, cfg, rng, masks))


def dropout_variance(net, x, cfg: McConfig, rng=None, masks=None) -> float:
    """``(1/K) sum_k ||o_k - mean(o)||^2`` over ``K`` masked passes."""
    return float(dropout_variances(net, np.asarray(x, dtype=float).reshape(1, -1), cfg, rng, masks)[0])


def variance_and_grad(net, X, cfg: McConfig, masks, example_weights=None):
    """Per-example dropout variances and the gradient of ``sum_j w_j V_j``."""
    X = _batch(X)
    n, k = X.shape[0], cfg.k_samples
    out, cache = nets.forward_batch(net, _tile(X, k), masks)
    dev = _deviations(out.reshape(n, k, -1))
    var = np.sum(dev * dev, axis=(1, 2)) / k
    w = np.ones(n) if example_weights is None else np.asarray(example_weights, dtype=float)
    # The mean's own derivative cancels because the deviations sum to zero.
    d_out = (2.0 / k) * dev * w[:, None, None]
    d_out = d_out.reshape(n * k, -1)
    if net.output_kind == "softmax":
        d_out = out * (d_out - np.sum(out * d_out, axis=1, keepdims=True))
    elif net.output_kind == "sigmoid":
        d_out = d_out * out * (1.0 - out)
    return var, nets.backward(net, cache, d_out)


def meta_loss_and_grad(net, X, y, cfg: McConfig, masks=None, rng=None):
    """Mean over the batch of ``loss + reg_weight * dropout variance`` and its gradient.

    The variance term is skipped entirely when ``reg_weight == 0``.
    """
    X = _batch(X)
    n = X.shape[0]
    ls, g = nets.batch_grad(net, X, y, weights=np.full(n, 1.0 / n))
    value = float(np.mean(ls))
    if cfg.reg_weight > 0:
        if masks is None:
            masks = sample_mc_masks(net, n, cfg, rng)
        var, gv = variance_and_grad(net, X, cfg, masks, np.full(n, cfg.reg_weight / n))
        value += float(cfg.reg_weight * np.mean(var))
        g = g + gv
    return value, g


def meta_loss(net, X, y, cfg: McConfig, rng=None, masks=None) -> float:
    X = _batch(X)
    ls = nets.losses(net, X, y)
    value = float(np.mean(ls))
    if cfg.reg_weight > 0:
        value += float(cfg.reg_weight * np.mean(dropout_variances(net, X, cfg, rng, masks)))
    return value


def _split_masks(net, masks, n_lab: int, cfg: McConfig):
    if masks is None:
        return None, None
    cut = n_lab * cfg.k_samples
    lab = nets.DropoutMask([m[:cut] for m in masks.layers], masks.keep_prob)
    unl = nets.DropoutMask([m[cut:] for m in masks.layers], masks.keep_prob)
    return lab, unl


def meta_loss_pv_and_grad(net, X_lab, y_lab, X_unl, cfg: McConfig, masks=None, rng=None):
    """Pooled meta-loss: labeled ``loss + g*V`` average plus unlabeled ``g*V`` average.

    ``masks`` (if given) covers the labeled rows first, then the unlabeled rows.
    An empty labeled set is allowed only with a positive ``reg_weight``.
    """
    X_lab = np.asarray(X_lab, dtype=float).reshape(-1, net.n_in)
    X_unl = np.asarray(X_unl, dtype=float).reshape(-1, net.n_in)
    n_lab, n_unl = X_lab.shape[0], X_unl.shape[0]
    if n_lab == 0 and (cfg.reg_weight == 0 or n_unl == 0):
        raise ValueError("pooled meta-loss needs labeled data or a positive reg_weight with unlabeled data")
    if masks is None and cfg.reg_weight > 0:
        masks = sample_mc_masks(net, n_lab + n_unl, cfg, rng)
    m_lab, m_unl = _split_masks(net, masks, n_lab, cfg)
    value, g = 0.0, np.zeros(net.params.shape[0])
    if n_lab:
        value, g = meta_loss_and_grad(net, X_lab, y_lab, cfg, masks=m_lab)
    if n_unl and cfg.reg_weight > 0:
        var, gv = variance_and_grad(net, X_unl, cfg, m_unl, np.full(n_unl, cfg.reg_weight / n_unl))
        value += float(cfg.reg_weight * np.mean(var))
        g = g + gv
    return value, g


def meta_loss_pv(net, X_lab, y_lab, X_unl, cfg: McConfig, rng=None, masks=None) -> float:
    return meta_loss_pv_and_grad(net, X_lab, y_lab, X_unl, cfg, masks=masks, rng=rng)[0]


def mcd_scores(net, X, cfg: McConfig, rng=None, masks=None) -> np.ndarray:
    """Entropy of the K-averaged softmax; higher means more uncertain."""
    if net.output_kind != "softmax":
        raise ValueError("unsupported: MC-dropout entropy needs a softmax classifier")
    p = mc_outputs_batch(net, X, cfg, rng, masks).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return -plogp.sum(axis=1)


def mcd_score(net, x, cfg: McConfig, rng=None, masks=None) -> float:
    return float(mcd_scores(net, np.asarray(x, dtype=float).reshape(1, -1), cfg, rng, masks)[0])
