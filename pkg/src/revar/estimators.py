"""scikit-learn style estimators around the bilevel trainer."""

from __future__ import annotations

import json
import os

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.preprocessing import LabelEncoder, StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from revar import nets
from revar.bilevel import TrainConfig, TrainData, TrainedPair, instance_weights, train
from revar.mcvar import McConfig, mcd_scores
from revar.metanet import MetaNet
from revar.numkit import make_rng
from revar.seleval import auarc, predictive_entropy, rejection_curve, softmax_response

_VAL_SPLIT_STREAM = 99
_MCD_STREAM = 98


class _ReVarBase(BaseEstimator):
    """Shared fitting logic; subclasses fix the task kind.

    Parameters
    ----------
    method : {"revar", "revar_pv", "ibr", "mwn", "erm", "vr", "mbr"}
        Training scheme. ``revar`` is the instance-conditional weight network
        with the dropout-variance meta-loss; the rest are comparison methods.
    hidden, meta_hidden : tuple of int
        Hidden widths of the predictor and the weight network. ``hidden=None``
        picks ``(32,)`` for regression and ``(64, 64)`` for classification.
    lr, lr_meta : float
        SGD step sizes of the predictor and the weight network.
    k_samples, dropout_rate, reg_weight : MC-dropout passes, drop probability
        and the weight of the variance term in the meta-loss.
    validation_fraction : float
        Share of the training rows held out as the meta set when ``fit`` gets
        no explicit validation data.
    warm_start : bool
        Continue from the current parameters on repeated ``fit`` calls.
    g_orientation : {"auto", "high", "low"}
        Classifier only; see :class:`ReVarClassifier`.
    meta_grad_clip : float or None
        Rescale each hypergradient to at most this Euclidean norm.
    """

    _kind = "regression"
    _default_hidden = (32,)

    def __init__(
        self,
        method="revar",
        hidden=None,
        meta_hidden=(32, 32),
        lr=0.01,
        lr_meta=1e-4,
        momentum=0.9,
        weight_decay=1e-4,
        epochs=60,
        warm_start_epochs=5,
        meta_interval=15,
        batch_size=64,
        val_batch_size=64,
        k_samples=10,
        dropout_rate=0.2,
        reg_weight=1.0,
        validation_fraction=0.1,
        mbr_temperature=1.0,
        standardize=True,
        warm_start=False,
        g_orientation="auto",
        meta_grad_clip=None,
        random_state=0,
    ):
        self.method = method
        self.hidden = hidden
        self.meta_hidden = meta_hidden
        self.lr = lr
        self.lr_meta = lr_meta
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.warm_start_epochs = warm_start_epochs
        self.meta_interval = meta_interval
        self.batch_size = batch_size
        self.val_batch_size = val_batch_size
        self.k_samples = k_samples
        self.dropout_rate = dropout_rate
        self.reg_weight = reg_weight
        self.validation_fraction = validation_fraction
        self.mbr_temperature = mbr_temperature
        self.standardize = standardize
        self.warm_start = warm_start
        self.g_orientation = g_orientation
        self.meta_grad_clip = meta_grad_clip
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_classifier=self.lr,
            lr_meta=self.lr_meta,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            warm_start_epochs=self.warm_start_epochs,
            meta_interval=self.meta_interval,
            batch_train=self.batch_size,
            batch_val=self.val_batch_size,
            batch_unlabeled=self.val_batch_size,
            mc=McConfig(self.k_samples, self.dropout_rate, self.reg_weight),
            seed=int(self.random_state),
            method=self.method,
            hidden=tuple(self._default_hidden if self.hidden is None else self.hidden),
            meta_hidden=tuple(self.meta_hidden),
            mbr_temperature=self.mbr_temperature,
            meta_grad_clip=self.meta_grad_clip,
        )

    # -- preprocessing -------------------------------------------------
    def _encode_y(self, y, fitting: bool):
        return np.asarray(y, dtype=float)

    def _scale_X(self, X):
        return self.x_scaler_.transform(X) if self.x_scaler_ is not None else np.asarray(X, dtype=float)

    def _split(self, X, y):
        n = X.shape[0]
        n_val = max(1, int(round(self.validation_fraction * n)))
        if n_val >= n:
            raise ValueError("validation_fraction leaves no training rows")
        perm = make_rng(int(self.random_state), _VAL_SPLIT_STREAM).permutation(n)
        va, tr = perm[:n_val], perm[n_val:]
        return X[tr], y[tr], X[va], y[va]

    def fit(self, X, y, X_val=None, y_val=None, X_unlabeled=None):
        """Train the predictor and weight network.

        Without ``X_val`` a ``validation_fraction`` slice of ``(X, y)`` is
        held out as the meta set. ``X_unlabeled`` feeds the pooled variant.
        """
        X, y = check_X_y(X, y, dtype=float, y_numeric=self._kind == "regression")
        if (X_val is None) != (y_val is None):
            raise ValueError("pass both X_val and y_val, or neither")
        resume = self.warm_start and hasattr(self, "pair_")
        y_enc = self._encode_y(y, fitting=not resume)
        if X_val is None:
            X, y_enc, X_val, yv_enc = self._split(X, y_enc)
        else:
            X_val, y_val = check_X_y(X_val, y_val, dtype=float, y_numeric=self._kind == "regression")
            if X_val.shape[1] != X.shape[1]:
                raise ValueError("X_val has a different number of features than X")
            yv_enc = self._encode_y(y_val, fitting=False)
        if not resume:
            self.n_features_in_ = X.shape[1]
            self.x_scaler_ = StandardScaler().fit(X) if self.standardize else None
            self._fit_target_scaling(y_enc)
        Xu = None
        if X_unlabeled is not None:
            Xu = self._scale_X(check_array(X_unlabeled, dtype=float))
        data = TrainData(
            self._scale_X(X), self._scale_y(y_enc), self._scale_X(X_val), self._scale_y(yv_enc),
            Xu, getattr(self, "n_classes_", None),
        )
        init = (self.pair_.classifier, self.pair_.meta) if resume else None
        self.pair_ = train(data, self.train_config(), init=init)
        self.history_ = self.pair_.history
        self._after_fit(data)
        return self

    def _fit_target_scaling(self, y):
        pass

    def _scale_y(self, y):
        return y

    def _after_fit(self, data: TrainData):
        pass

    # -- weights -------------------------------------------------------
    def instance_weights(self, X, y=None) -> np.ndarray:
        """Weight-network outputs ``g(x)`` in (0, 1); MWN also needs ``y``."""
        check_is_fitted(self, "pair_")
        X = check_array(X, dtype=float)
        yy = None if y is None else self._scale_y(self._encode_y(y, fitting=False))
        return instance_weights(self.pair_, self._scale_X(X), yy)

    def _raw_output(self, X):
        check_is_fitted(self, "pair_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return nets.forward_batch(self.pair_.classifier, self._scale_X(X))[0]

    @property
    def classifier_(self) -> nets.NetParams:
        return self.pair_.classifier

    @property
    def meta_(self):
        return self.pair_.meta


class ReVarRegressor(RegressorMixin, _ReVarBase):
    _kind = "regression"

    def _fit_target_scaling(self, y):
        if self.standardize:
            self.y_mean_, self.y_scale_ = float(np.mean(y)), float(np.std(y)) or 1.0
        else:
            self.y_mean_, self.y_scale_ = 0.0, 1.0

    def _scale_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean_) / self.y_scale_

    def predict(self, X) -> np.ndarray:
        return self._raw_output(X)[:, 0] * self.y_scale_ + self.y_mean_


class ReVarClassifier(ClassifierMixin, _ReVarBase):
    """Classifier variant; adds selection scores for abstention.

    ``g_orientation`` fixes how weights map to uncertainty: ``"high"`` treats
    a large weight as uncertain, ``"low"`` a small one, and ``"auto"`` picks
    whichever ranks the held-out meta set better by AUARC.
    """

    _kind = "classification"
    _default_hidden = (64, 64)

    def _encode_y(self, y, fitting: bool):
        if fitting:
            self.label_encoder_ = LabelEncoder().fit(y)
            self.classes_ = self.label_encoder_.classes_
            self.n_classes_ = len(self.classes_)
            if self.n_classes_ < 2:
                raise ValueError("need at least two classes")
        return self.label_encoder_.transform(y)

    def _after_fit(self, data: TrainData):
        if self.g_orientation not in ("auto", "high", "low"):
            raise ValueError(f"g_orientation must be 'auto', 'high' or 'low', got {self.g_orientation!r}")
        if self.pair_.meta is None or self.g_orientation != "auto":
            self.g_sign_ = -1.0 if self.g_orientation == "low" else 1.0
            return
        p = nets.forward_batch(self.pair_.classifier, data.X_val)[0]
        correct = p.argmax(axis=1) == data.y_val
        w = instance_weights(self.pair_, data.X_val, data.y_val)
        high = auarc(rejection_curve(w, correct))
        low = auarc(rejection_curve(-w, correct))
        self.g_sign_ = 1.0 if high >= low else -1.0

    def predict_proba(self, X) -> np.ndarray:
        return self._raw_output(X)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def uncertainty(self, X, kind: str = "g", y=None) -> np.ndarray:
        """Selection score, larger meaning less trustworthy.

        ``kind`` is ``"g"`` (weight network), ``"sr"`` (one minus max softmax),
        ``"entropy"`` (softmax entropy) or ``"mcd"`` (entropy of the MC-dropout
        averaged softmax, seeded from ``random_state``).
        """
        if kind == "g":
            return self.g_sign_ * self.instance_weights(X, y)
        if kind == "sr":
            return softmax_response(self.predict_proba(X))
        if kind == "entropy":
            return predictive_entropy(self.predict_proba(X))
        if kind == "mcd":
            check_is_fitted(self, "pair_")
            cfg = McConfig(self.k_samples, self.dropout_rate, self.reg_weight)
            rng = make_rng(int(self.random_state), _MCD_STREAM)
            return mcd_scores(self.pair_.classifier, self._scale_X(check_array(X, dtype=float)), cfg, rng)
        raise ValueError(f"unknown score kind {kind!r}")


def save_checkpoint(est: _ReVarBase, out_dir) -> list:
    """Write ``classifier.json``, ``meta.json`` (if any) and ``estimator.json``."""
    check_is_fitted(est, "pair_")
    os.makedirs(out_dir, exist_ok=True)
    files = ["classifier.json"]
    nets.save(est.pair_.classifier, os.path.join(out_dir, "classifier.json"))
    if est.pair_.meta is not None:
        d = nets.to_dict(est.pair_.meta.net)
        d["conditioning"] = est.pair_.meta.conditioning
        with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(d, fh)
        files.append("meta.json")
    state = {
        "kind": est._kind,
        "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in est.get_params().items()},
        "n_features_in": est.n_features_in_,
        "x_mean": None if est.x_scaler_ is None else est.x_scaler_.mean_.tolist(),
        "x_scale": None if est.x_scaler_ is None else est.x_scaler_.scale_.tolist(),
    }
    if isinstance(est, ReVarRegressor):
        state.update(y_mean=est.y_mean_, y_scale=est.y_scale_)
    else:
        state.update(classes=est.classes_.tolist(), g_sign=est.g_sign_)
    with open(os.path.join(out_dir, "estimator.json"), "w", encoding="utf-8") as fh:
        json.dump(state, fh, indent=1, sort_keys=True)
    files.append("estimator.json")
    return files


def load_checkpoint(ckpt_dir) -> _ReVarBase:
    with open(os.path.join(ckpt_dir, "estimator.json"), encoding="utf-8") as fh:
        state = json.load(fh)
    params = {k: (tuple(v) if k in ("hidden", "meta_hidden") and v is not None else v) for k, v in state["params"].items()}
    est = (ReVarRegressor if state["kind"] == "regression" else ReVarClassifier)(**params)
    classifier = nets.load(os.path.join(ckpt_dir, "classifier.json"))
    meta = None
    meta_path = os.path.join(ckpt_dir, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            d = json.load(fh)
        meta = MetaNet(nets.from_dict(d), d.get("conditioning", "instance"))
    est.pair_ = TrainedPair(classifier, meta, [])
    est.history_ = []
    est.n_features_in_ = state["n_features_in"]
    if state["x_mean"] is None:
        est.x_scaler_ = None
    else:
        sc = StandardScaler()
        sc.mean_ = np.asarray(state["x_mean"])
        sc.scale_ = np.asarray(state["x_scale"])
        sc.var_ = sc.scale_**2
        sc.n_features_in_ = len(sc.mean_)
        sc.n_samples_seen_ = 1
        est.x_scaler_ = sc
    if state["kind"] == "regression":
        est.y_mean_, est.y_scale_ = state["y_mean"], state["y_scale"]
    else:
        est.classes_ = np.asarray(state["classes"])
        est.label_encoder_ = LabelEncoder().fit(est.classes_)
        est.n_classes_ = len(est.classes_)
        est.g_sign_ = state["g_sign"]
    return est
