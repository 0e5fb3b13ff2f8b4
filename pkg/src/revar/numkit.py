"""Seeded random streams and the small statistics kernel shared by the package."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a counter-based (Philox) generator for ``(seed, *stream)``.

    Distinct ``stream`` tuples give statistically independent sub-streams; the
    same tuple always reproduces the same sequence.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def substream(rng: np.random.Generator, *stream: int) -> np.random.Generator:
    """Derive an independent child generator from ``rng`` without consuming it."""
    seq = rng.bit_generator.seed_seq
    key = tuple(seq.spawn_key) + tuple(int(s) for s in stream)
    ss = np.random.SeedSequence(seq.entropy, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def gaussian_sample(rng: np.random.Generator, mean: float, std: float, n: int) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return rng.normal(mean, std, size=int(n))


class OLSFit(NamedTuple):
    coef: np.ndarray
    r_squared: float
    intercept: float


def ols_fit(features, targets) -> OLSFit:
    """Least squares with an intercept column.

    ``features`` may have zero columns, in which case only the intercept is
    fitted and ``r_squared`` is 0 by definition. Constant targets also give
    ``r_squared == 0``.

    Raises
    ------
    np.linalg.LinAlgError
        If the design (intercept plus features) is rank deficient; the message
        names the first offending column.
    """
    y = np.asarray(targets, dtype=float).ravel()
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if n != y.shape[0]:
        raise ValueError(f"features have {n} rows but targets have {y.shape[0]}")
    if n < p + 1:
        raise ValueError(f"need at least {p + 1} rows for {p} features plus intercept, got {n}")
    design = np.column_stack([np.ones(n), X])
    _check_rank(design)
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ beta
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(resid @ resid)
    r2 = 0.0 if p == 0 or ss_tot == 0.0 or np.all(y == y[0]) else 1.0 - ss_res / ss_tot
    return OLSFit(coef=beta[1:], r_squared=r2, intercept=float(beta[0]))


def _check_rank(design: np.ndarray) -> None:
    # Column-by-column Gram-Schmidt on scaled columns so the culprit can be named.
    scale = np.linalg.norm(design, axis=0)
    basis: list[np.ndarray] = []
    for j in range(design.shape[1]):
        col = design[:, j] / scale[j] if scale[j] > 0 else design[:, j]
        for q in basis:
            col = col - (q @ col) * q
        norm = np.linalg.norm(col)
        if scale[j] == 0 or norm < 1e-10:
            name = "intercept" if j == 0 else f"feature column {j - 1}"
            raise np.linalg.LinAlgError(f"singular design: {name} is linearly dependent on earlier columns")
        basis.append(col / norm)


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties.

    Zero rank variance in either argument is defined as correlation 0.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 3:
        raise ValueError("spearman needs at least 3 observations")
    ra = rankdata(a) - (a.shape[0] + 1) / 2.0
    rb = rankdata(b) - (b.shape[0] + 1) / 2.0
    denom = np.sqrt((ra @ ra) * (rb @ rb))
    if denom == 0:
        return 0.0
    return float(np.clip((ra @ rb) / denom, -1.0, 1.0))
