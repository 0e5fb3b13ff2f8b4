"""Selective-prediction curves, calibration error and the weight-fit harness."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from revar.numkit import ols_fit, spearman
from revar.synthgen import SyntheticBundle, target_weight_features

COVERAGE_GRID = np.round(np.arange(1, 21) * 0.05, 2)


@dataclass
class RejectionCurve:
    coverages: np.ndarray
    accuracies: np.ndarray
    score_kind: str = "g"

    def to_rows(self) -> list:
        return [(float(c), float(a)) for c, a in zip(self.coverages, self.accuracies)]


def _n_keep(coverage: float, n: int) -> int:
    # Round first so 0.15 * 20 counts as 3, not ceil(3.0000000000000004).
    return max(1, math.ceil(round(coverage * n, 9)))


def selection_order(uncertainty) -> np.ndarray:
    """Indices from least to most uncertain; ties keep ascending index order."""
    return np.argsort(np.asarray(uncertainty, dtype=float), kind="stable")


def rejection_curve(uncertainty, correct, grid: Optional[Sequence[float]] = None, score_kind: str = "g") -> RejectionCurve:
    """Accuracy on the ``ceil(c N)`` least uncertain items for each coverage ``c``."""
    u = np.asarray(uncertainty, dtype=float).ravel()
    ok = np.asarray(correct, dtype=float).ravel()
    if u.size == 0:
        raise ValueError("rejection_curve needs at least one item")
    if u.shape != ok.shape:
        raise ValueError(f"length mismatch: {u.size} scores vs {ok.size} correctness flags")
    grid = COVERAGE_GRID if grid is None else np.asarray(grid, dtype=float)
    if np.any(grid <= 0) or np.any(grid > 1) or np.any(np.diff(grid) <= 0):
        raise ValueError("coverage grid must be strictly increasing inside (0, 1]")
    csum = np.cumsum(ok[selection_order(u)])
    keep = np.array([_n_keep(c, u.size) for c in grid])
    return RejectionCurve(grid.copy(), csum[keep - 1] / keep, score_kind)


def auarc(curve: RejectionCurve) -> float:
    """Mean accuracy over the coverage grid."""
    if len(curve.accuracies) == 0:
        raise ValueError("empty curve")
    return float(np.mean(curve.accuracies))


def selective_accuracy(uncertainty, correct, coverage: float) -> float:
    return float(rejection_curve(uncertainty, correct, [coverage]).accuracies[0])


def ece(confidences, correct, n_bins=15) -> float:
    """Binned ``sum_b (n_b/N) |acc_b - conf_b|``.

    ``n_bins`` is either a count of equal-width bins on ``[0, 1]`` or an
    increasing sequence of bin edges. Bins are half-open except the top one,
    which is closed; empty bins contribute nothing.
    """
    conf = np.asarray(confidences, dtype=float).ravel()
    ok = np.asarray(correct, dtype=float).ravel()
    if conf.shape != ok.shape:
        raise ValueError("length mismatch between confidences and correctness flags")
    if conf.size == 0:
        return 0.0
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    if np.ndim(n_bins) == 0:
        nb = int(n_bins)
        bins = np.minimum((conf * nb).astype(int), nb - 1)
    else:
        edges = np.asarray(n_bins, dtype=float)
        if edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if np.any(conf < edges[0]) or np.any(conf > edges[-1]):
            raise ValueError("confidences fall outside the bin edges")
        bins = np.minimum(np.searchsorted(edges, conf, side="right") - 1, edges.size - 2)
    total = 0.0
    for b in np.unique(bins):
        sel = bins == b
        total += sel.sum() / conf.size * abs(ok[sel].mean() - conf[sel].mean())
    return float(total)


def selective_ece(confidences, correct, uncertainty, coverage: float, n_bins=15) -> float:
    """ECE restricted to the items kept at ``coverage``."""
    order = selection_order(uncertainty)
    kept = order[: _n_keep(coverage, order.size)]
    return ece(np.asarray(confidences)[kept], np.asarray(correct)[kept], n_bins)


def softmax_response(probs) -> np.ndarray:
    """Uncertainty ``1 - max_k p_k``."""
    return 1.0 - np.asarray(probs).max(axis=1)


def predictive_entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)


@dataclass
class ScenarioFit:
    r2: float
    coefficients: np.ndarray
    spearman: float
    intercept: float = 0.0


def _world_features(bundle: SyntheticBundle) -> np.ndarray:
    return target_weight_features(bundle.spec, bundle.params, bundle.train.x_full)


def scenario_fit(bundle: SyntheticBundle, weights, multi_world=None) -> ScenarioFit:
    """Regress weight-network outputs on a scenario's ideal-weight features.

    S1/S2 fit per training instance. S3/S4 fit per world: the mean weight of
    each world against the world-mean features; ``multi_world`` supplies the
    other ``(bundle, weights)`` worlds. S5 has only a constant target, so the
    fit is intercept-only (``r2 == 0``) and Spearman is 0.
    """
    sid = bundle.spec.id
    w = np.asarray(weights, dtype=float).ravel()
    if w.shape[0] != len(bundle.train):
        raise ValueError(f"{w.shape[0]} weights for {len(bundle.train)} training rows")
    if sid in ("S3", "S4"):
        if not multi_world:
            raise ValueError(f"{sid} fits across worlds; pass multi_world")
        worlds = [(bundle, w)] + [(b, np.asarray(ww, dtype=float).ravel()) for b, ww in multi_world]
        feats = np.array([_world_features(b).mean(axis=0) for b, _ in worlds])
        targets = np.array([ww.mean() for _, ww in worlds])
    elif sid == "S5":
        fit = ols_fit(np.zeros((w.shape[0], 0)), w)
        return ScenarioFit(fit.r_squared, fit.coef, 0.0, fit.intercept)
    else:
        feats, targets = _world_features(bundle), w
    fit = ols_fit(feats, targets)
    rho = spearman(targets, feats[:, 0]) if targets.shape[0] >= 3 else float("nan")
    return ScenarioFit(fit.r_squared, fit.coef, rho, fit.intercept)


def hardness_share(bundle: SyntheticBundle, weights) -> dict:
    """Fraction of the fitted two-term target explained by the hardness term.

    S2 fits ``w ~ a + l1 t + l2 h`` and reports ``l2 mean(h) / (l1 mean(t) +
    l2 mean(h))``. In S4 the noise term is constant inside a world and
    coincides with the intercept, so ``w ~ l1t + l2 h`` and the share is
    ``l2 mean(h) / mean(w)``.
    """
    sid = bundle.spec.id
    if sid not in ("S2", "S4"):
        raise ValueError(f"hardness share is defined for S2 and S4, not {sid}")
    w = np.asarray(weights, dtype=float).ravel()
    feats = _world_features(bundle)
    h = feats[:, 1]
    if sid == "S2":
        fit = ols_fit(feats, w)
        lam1, lam2 = fit.coef
        noise_part = lam1 * feats[:, 0].mean()
    elif sid == "S4":
        fit = ols_fit(h[:, None], w)
        lam2 = fit.coef[0]
        noise_part = fit.intercept
        lam1 = fit.intercept / feats[0, 0]
    hard_part = lam2 * h.mean()
    denom = noise_part + hard_part
    share = float(hard_part / denom) if denom != 0 else float("nan")
    return {"lambda1": float(lam1), "lambda2": float(lam2), "share": share, "r2": fit.r_squared}


def coefficient_of_variation(weights) -> float:
    w = np.asarray(weights, dtype=float)
    m = w.mean()
    return float(w.std() / m) if m != 0 else float("inf")


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


@dataclass
class MetricsReport:
    auarc: Optional[float] = None
    ece: Optional[float] = None
    selective_ece: dict = field(default_factory=dict)
    selective_accuracy: dict = field(default_factory=dict)
    r2_by_scenario: dict = field(default_factory=dict)
    spearman_by_scenario: dict = field(default_factory=dict)
    seed: int = 0
    config_digest: str = ""
    score_kind: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, default=_jsonable)
