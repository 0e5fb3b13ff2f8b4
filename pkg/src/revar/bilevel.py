"""Alternating bilevel training of a predictor and its weight network.

The predictor takes SGD steps on ``g(x_i) * loss_i``. Every
``meta_interval`` predictor steps the weight network takes one step on the
validation meta-loss, differentiated through a single unrolled weighted SGD
step of a copy of the predictor. Baselines (ERM, VR, MBR, MWN, IBR) share
the same loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from revar import metanet as mn
from revar import nets
from revar.mcvar import McConfig, meta_loss, meta_loss_pv_and_grad, sample_mc_masks, variance_and_grad
from revar.numkit import make_rng, substream

log = logging.getLogger(__name__)

METHODS = ("revar", "revar_pv", "ibr", "mwn", "erm", "vr", "mbr")
BILEVEL_METHODS = ("revar", "revar_pv", "ibr", "mwn")

# Sub-stream ids; fixed so that methods never perturb each other's randomness.
_INIT, _SHUFFLE, _VAL, _MASKS, _UNL, _EVAL = range(6)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    lr_classifier: float = 0.01
    lr_meta: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 60
    warm_start_epochs: int = 5
    meta_interval: int = 15
    batch_train: int = 64
    batch_val: int = 64
    batch_unlabeled: int = 64
    mc: McConfig = field(default_factory=McConfig)
    seed: int = 0
    method: str = "revar"
    hidden: tuple = (32,)
    meta_hidden: tuple = (32, 32)
    mbr_temperature: float = 1.0
    meta_grad_clip: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.mc, dict):
            self.mc = McConfig(**self.mc)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.meta_hidden = tuple(int(h) for h in self.meta_hidden)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method: unknown method tag {self.method!r}; expected one of {METHODS}")
        if self.lr_classifier <= 0 or self.lr_meta <= 0:
            raise ValueError("lr_classifier/lr_meta: learning rates must be positive")
        if self.meta_interval < 1:
            raise ValueError("meta_interval: must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs: must be >= 0")
        if self.epochs > 0 and not 0 <= self.warm_start_epochs < self.epochs:
            raise ValueError("warm_start_epochs: must be smaller than epochs")
        for name in ("batch_train", "batch_val", "batch_unlabeled"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        if self.meta_grad_clip is not None and self.meta_grad_clip <= 0:
            raise ValueError("meta_grad_clip: must be positive or None")
        if not self.hidden:
            raise ValueError("hidden: the predictor needs at least one hidden layer for dropout")

    @property
    def meta_mc(self) -> McConfig:
        """MC settings used inside the meta-loss; the variance term is off for MWN/IBR."""
        if self.method in ("ibr", "mwn"):
            return replace(self.mc, reg_weight=0.0)
        return self.mc


@dataclass
class TrainData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_unlabeled: Optional[np.ndarray] = None
    n_classes: Optional[int] = None

    @property
    def kind(self) -> str:
        return "regression" if self.n_classes is None else "classification"


@dataclass
class TrainedPair:
    classifier: nets.NetParams
    meta: Optional[mn.MetaNet]
    history: list = field(default_factory=list)


def inner_step(theta: nets.NetParams, batch, meta: mn.MetaNet, lr: float) -> nets.NetParams:
    """One plain weighted SGD step on a copy: ``theta - lr/n sum_i g_i grad l_i``."""
    X, y = batch
    ls, per_ex = nets.batch_grad(theta, X, y, per_example=True)
    w = mn.weights(meta, mn.meta_inputs(meta, X, ls))
    return theta.with_params(theta.params - (lr / len(ls)) * (w @ per_ex))


def _val_objective_grad(net, batch_val, cfg: McConfig, masks, unlabeled=None):
    Xv, yv = batch_val
    Xu = np.zeros((0, net.n_in)) if unlabeled is None else unlabeled
    return meta_loss_pv_and_grad(net, Xv, yv, Xu, cfg, masks=masks)


def meta_gradient(
    theta: nets.NetParams,
    batch_train,
    batch_val,
    meta: mn.MetaNet,
    cfg: McConfig,
    lr: float,
    rng: Optional[np.random.Generator] = None,
    masks=None,
    unlabeled=None,
    return_value: bool = False,
):
    """Hypergradient of the validation meta-loss w.r.t. the weight-network parameters.

    With ``a_i = <grad meta_loss(theta_hat), grad l_i(theta)>`` the result is
    ``-(lr/n) sum_i a_i grad_Theta g(x_i)``, the exact derivative through one
    unrolled weighted step when the dropout masks are held fixed.
    """
    X, y = batch_train
    ls, per_ex = nets.batch_grad(theta, X, y, per_example=True)
    inputs = mn.meta_inputs(meta, X, ls)
    w = mn.weights(meta, inputs)
    n = len(ls)
    theta_hat = theta.with_params(theta.params - (lr / n) * (w @ per_ex))
    if masks is None and cfg.reg_weight > 0:
        n_val = len(batch_val[0]) + (0 if unlabeled is None else len(unlabeled))
        masks = sample_mc_masks(theta, n_val, cfg, rng)
    value, v = _val_objective_grad(theta_hat, batch_val, cfg, masks, unlabeled)
    a = per_ex @ v
    g = -(lr / n) * mn.weights_vjp(meta, inputs, a)
    return (g, value) if return_value else g


def meta_gradient_fd(
    theta: nets.NetParams,
    batch_train,
    batch_val,
    meta: mn.MetaNet,
    cfg: McConfig,
    lr: float,
    step: float = 1e-5,
    masks=None,
    unlabeled=None,
    coords: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central differences of ``Theta -> meta_loss(inner_step(theta, ., g_Theta))``.

    ``masks`` must be supplied whenever the variance term is active so the
    objective is deterministic. ``coords`` restricts the perturbed coordinates.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if masks is None and cfg.reg_weight > 0:
        raise ValueError("fixed dropout masks are required for a deterministic objective")
    idx = np.arange(meta.params.shape[0]) if coords is None else np.asarray(coords, dtype=int)
    base = meta.params

    def objective(p):
        th = inner_step(theta, batch_train, meta.with_params(p), lr)
        return _val_objective_grad(th, batch_val, cfg, masks, unlabeled)[0]

    out = np.empty(idx.shape[0])
    for j, i in enumerate(idx):
        e = np.zeros_like(base)
        e[i] = step
        out[j] = (objective(base + e) - objective(base - e)) / (2 * step)
    return out


def mbr_weights(net: nets.NetParams, X, y, temperature: float = 1.0) -> np.ndarray:
    """``exp(-margin / T)`` normalised to mean one, margin = p_true - max other p."""
    if net.output_kind != "softmax":
        raise ValueError("margin-based reweighting needs a softmax classifier")
    p = nets.forward_batch(net, X)[0]
    y = np.asarray(y, dtype=int)
    rows = np.arange(len(y))
    p_true = p[rows, y]
    other = p.copy()
    other[rows, y] = -np.inf
    w = np.exp(-(p_true - other.max(axis=1)) / temperature)
    return w / w.mean()


class _Cycler:
    """Deterministic reshuffling cursor over ``n`` rows."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        k = min(k, self.n)
        if self.pos + k > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos : self.pos + k]
        self.pos += k
        return idx


def init_pair(data: TrainData, cfg: TrainConfig, rng: np.random.Generator):
    n_out = 1 if data.n_classes is None else int(data.n_classes)
    kind = "linear" if data.n_classes is None else "softmax"
    init = substream(rng, _INIT)
    theta = nets.init_net((data.X_train.shape[1], *cfg.hidden, n_out), init, kind, cfg.mc.dropout_rate)
    meta = None
    if cfg.method in BILEVEL_METHODS:
        cond = "loss_scalar" if cfg.method == "mwn" else "instance"
        meta = mn.init_metanet(data.X_train.shape[1], init, cfg.meta_hidden, cond)
    return theta, meta


def _targets(data: TrainData, y):
    return np.asarray(y, dtype=int) if data.n_classes is not None else np.asarray(y, dtype=float).reshape(-1, 1)


def train(data: TrainData, cfg: TrainConfig, rng: Optional[np.random.Generator] = None, init=None) -> TrainedPair:
    """Run warm start, then alternate predictor and weight-network updates.

    ``init`` optionally supplies a starting ``(classifier, meta)`` pair, e.g. a
    checkpoint to resume from.
    """
    cfg.validate()
    if cfg.method == "revar_pv" and (data.X_unlabeled is None or len(data.X_unlabeled) == 0):
        raise ValueError("revar_pv needs unlabeled shifted inputs")
    if cfg.method == "mbr" and data.n_classes is None:
        raise ValueError("mbr is defined for classifiers only")
    rng = make_rng(cfg.seed) if rng is None else rng
    theta, meta = init_pair(data, cfg, rng) if init is None else (init[0].copy(), None if init[1] is None else init[1].copy())
    Xtr, ytr = np.asarray(data.X_train, dtype=float), _targets(data, data.y_train)
    Xva, yva = np.asarray(data.X_val, dtype=float), _targets(data, data.y_val)
    Xun = None if data.X_unlabeled is None else np.asarray(data.X_unlabeled, dtype=float)

    shuffle = substream(rng, _SHUFFLE)
    val_cur = _Cycler(len(Xva), substream(rng, _VAL))
    mask_rng = substream(rng, _MASKS)
    unl_cur = _Cycler(len(Xun), substream(rng, _UNL)) if cfg.method == "revar_pv" else None
    meta_cfg = cfg.meta_mc

    vel = np.zeros_like(theta.params)
    vel_meta = None if meta is None else np.zeros_like(meta.params)
    history = []
    t = 0
    n = len(Xtr)
    # Overflow is caught by the divergence guard below.
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            warm = epoch < cfg.warm_start_epochs
            perm = shuffle.permutation(n)
            epoch_losses = []
            for start in range(0, n, cfg.batch_train):
                idx = perm[start : start + cfg.batch_train]
                Xb, yb = Xtr[idx], ytr[idx]
                t += 1
                if meta is not None and not warm and t % cfg.meta_interval == 0:
                    vidx = val_cur.take(cfg.batch_val)
                    unl = Xun[unl_cur.take(cfg.batch_unlabeled)] if unl_cur is not None else None
                    g_meta = meta_gradient(
                        theta, (Xb, yb), (Xva[vidx], yva[vidx]), meta, meta_cfg,
                        cfg.lr_classifier, rng=mask_rng, unlabeled=unl,
                    )
                    if cfg.meta_grad_clip is not None:
                        g_meta = _clip_norm(g_meta, cfg.meta_grad_clip)
                    g_meta = g_meta + cfg.weight_decay * meta.params
                    vel_meta = cfg.momentum * vel_meta + g_meta
                    meta = meta.with_params(meta.params - cfg.lr_meta * vel_meta)

                ls, dz, cache = nets.losses_and_dlogits(theta, Xb, yb)
                nb = len(idx)
                w = _batch_weights(cfg, theta, meta, Xb, yb, ls, warm)
                grad = nets.backward(theta, cache, dz * (w / nb)[:, None])
                if cfg.method == "vr" and cfg.mc.reg_weight > 0:
                    masks = sample_mc_masks(theta, nb, cfg.mc, mask_rng)
                    _, gv = variance_and_grad(theta, Xb, cfg.mc, masks, np.full(nb, cfg.mc.reg_weight / nb))
                    grad = grad + gv
                grad = grad + cfg.weight_decay * theta.params
                vel = cfg.momentum * vel + grad
                theta = theta.with_params(theta.params - cfg.lr_classifier * vel)
                batch_loss = float(np.mean(ls))
                if not np.isfinite(batch_loss) or not np.all(np.isfinite(theta.params)):
                    raise DivergenceError(
                        f"non-finite training loss at epoch {epoch}, step {t} (lr_classifier={cfg.lr_classifier})"
                    )
                epoch_losses.append(batch_loss)
            history.append(_epoch_record(epoch, cfg, theta, meta, Xtr, ytr, Xva, yva, epoch_losses, warm, rng))
    return TrainedPair(theta, meta, history)


def _clip_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    return g * (max_norm / norm) if norm > max_norm else g


def _batch_weights(cfg, theta, meta, Xb, yb, ls, warm) -> np.ndarray:
    if cfg.method == "mbr":
        return mbr_weights(theta, Xb, yb, cfg.mbr_temperature)
    if meta is None or warm:
        return np.ones(len(ls))
    return mn.weights(meta, mn.meta_inputs(meta, Xb, ls))


def _epoch_record(epoch, cfg, theta, meta, Xtr, ytr, Xva, yva, epoch_losses, warm, rng) -> dict:
    eval_rng = substream(rng, _EVAL, epoch)
    ml = meta_loss(theta, Xva, yva, cfg.meta_mc, rng=eval_rng)
    if cfg.method == "mbr":
        w = mbr_weights(theta, Xtr, ytr, cfg.mbr_temperature)
    elif meta is None or warm:
        w = np.ones(len(Xtr))
    else:
        w = mn.weights(meta, mn.meta_inputs(meta, Xtr, nets.losses(theta, Xtr, ytr)))
    rec = {
        "epoch": epoch,
        "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
        "meta_loss": ml,
        "weight_mean": float(np.mean(w)),
        "weight_sd": float(np.std(w)),
    }
    log.debug("epoch %d %s", epoch, rec)
    return rec


def train_baseline(data: TrainData, cfg: TrainConfig, rng: Optional[np.random.Generator] = None) -> TrainedPair:
    """Train one of the comparison methods (``erm``, ``vr``, ``mbr``, ``mwn``, ``ibr``)."""
    if cfg.method not in ("erm", "vr", "mbr", "mwn", "ibr"):
        raise ValueError(f"unknown baseline method tag {cfg.method!r}")
    return train(data, cfg, rng)


def instance_weights(pair: TrainedPair, X, y=None) -> np.ndarray:
    """Weights the trained weight network assigns to ``X`` (losses needed for MWN)."""
    if pair.meta is None:
        raise ValueError("this method has no weight network")
    ls = None
    if pair.meta.conditioning == "loss_scalar":
        if y is None:
            raise ValueError("loss-conditioned weights need targets")
        y = np.asarray(y)
        yy = y.astype(int) if pair.classifier.output_kind == "softmax" else y.astype(float).reshape(-1, 1)
        ls = nets.losses(pair.classifier, X, yy)
    return mn.weights(pair.meta, mn.meta_inputs(pair.meta, X, ls))
