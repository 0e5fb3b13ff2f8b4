"""Synthetic heteroscedastic regression worlds with optional covariate shift.

Every world draws ``x ~ N(mu, diag(sigma^2))`` over ``d_core + d_latent``
coordinates and labels ``y = w.x + eps * (c + g.x)`` with ``eps ~ N(0, 1)``.
Validation and test inputs share a mean moved by ``s * N(shift_mu,
diag(shift_sigma^2))``. Five scenario presets switch the noise, the shift,
and whether the latent block is visible to the learner.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from revar.numkit import gaussian_sample, make_rng, substream

SCENARIOS = ("S1", "S2", "S3", "S4", "S5")
FEATURE_FLOOR = 1e-6


@dataclass
class GeneratorParams:
    w_core: np.ndarray
    w_latent: np.ndarray
    g_noise: np.ndarray
    c: float
    s: float
    mu: np.ndarray
    sigma_diag: np.ndarray
    shift_mu: np.ndarray
    shift_sigma_diag: np.ndarray

    def __post_init__(self):
        for name in ("w_core", "w_latent", "g_noise", "mu", "sigma_diag", "shift_mu", "shift_sigma_diag"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        d = self.dim
        for name in ("g_noise", "mu", "sigma_diag", "shift_mu", "shift_sigma_diag"):
            if getattr(self, name).shape != (d,):
                raise ValueError(f"{name} must have length {d}")
        if np.any(self.sigma_diag <= 0) or np.any(self.shift_sigma_diag <= 0):
            raise ValueError("sigma_diag and shift_sigma_diag must be strictly positive")

    @property
    def d_core(self) -> int:
        return self.w_core.shape[0]

    @property
    def d_latent(self) -> int:
        return self.w_latent.shape[0]

    @property
    def dim(self) -> int:
        return self.d_core + self.d_latent

    @property
    def w_data(self) -> np.ndarray:
        return np.concatenate([self.w_core, self.w_latent])

    def latent_variance(self) -> float:
        """``w_e' Sigma_ee w_e``: label variance the hidden block contributes."""
        sig_e = self.sigma_diag[self.d_core :]
        return float(np.sum(self.w_latent**2 * sig_e**2))

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorParams":
        return cls(**d)


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    c: float
    s: float
    g_active: bool
    observe_latent: bool
    latent_shift_only: bool = False
    w_latent_zero: bool = False

    def __post_init__(self):
        if self.id not in SCENARIOS:
            raise ValueError(f"scenario: unknown scenario id {self.id!r}; expected one of {SCENARIOS}")


def scenario_spec(scenario_id: str, s: Optional[float] = None) -> ScenarioSpec:
    """Preset for one of S1..S5; ``s`` overrides the shift magnitude."""
    presets = {
        "S1": dict(c=0.0, s=0.0, g_active=True, observe_latent=True),
        "S2": dict(c=0.0, s=25.0, g_active=True, observe_latent=True),
        "S3": dict(c=1.0, s=0.0, g_active=False, observe_latent=False),
        "S4": dict(c=1.0, s=50.0, g_active=False, observe_latent=False),
        "S5": dict(c=1.0, s=25.0, g_active=False, observe_latent=True, latent_shift_only=True, w_latent_zero=True),
    }
    if scenario_id not in presets:
        raise ValueError(f"scenario: unknown scenario id {scenario_id!r}; expected one of {SCENARIOS}")
    kw = presets[scenario_id]
    if s is not None:
        kw = {**kw, "s": float(s)}
    return ScenarioSpec(scenario_id, **kw)


@dataclass
class LabeledSet:
    x_full: np.ndarray
    x_observed: np.ndarray
    y: np.ndarray
    noise_std: np.ndarray
    hardness: np.ndarray

    def __len__(self) -> int:
        return self.y.shape[0]


@dataclass
class SyntheticBundle:
    train: LabeledSet
    val: LabeledSet
    test: LabeledSet
    params: GeneratorParams
    spec: ScenarioSpec
    seed: Optional[int] = None
    shift: np.ndarray = field(default=None)


def sample_generator_params(rng: np.random.Generator, dims=(48, 24)) -> GeneratorParams:
    d_c, d_e = (int(d) for d in dims)
    if d_c < 1 or d_e < 0:
        raise ValueError(f"dims must be positive, got {dims}")
    d = d_c + d_e
    w = gaussian_sample(rng, 5.0, 10.0, d)
    g = gaussian_sample(rng, 12.0, 18.0, d)
    mu = gaussian_sample(rng, 1.0, 10.0, d)
    sigma = np.maximum(np.abs(gaussian_sample(rng, 5.0, 10.0, d)), 0.1)
    return GeneratorParams(
        w_core=w[:d_c], w_latent=w[d_c:], g_noise=g, c=0.0, s=0.0,
        mu=mu, sigma_diag=sigma, shift_mu=np.zeros(d), shift_sigma_diag=np.ones(d),
    )


def adapt_params(spec: ScenarioSpec, params: GeneratorParams) -> GeneratorParams:
    """Impose a scenario's ``c``, ``s``, ``G = 0`` and ``w_e = 0`` settings."""
    return replace(
        params,
        c=float(spec.c),
        s=float(spec.s),
        g_noise=params.g_noise if spec.g_active else np.zeros_like(params.g_noise),
        w_latent=np.zeros_like(params.w_latent) if spec.w_latent_zero else params.w_latent,
    )


def _check_consistent(spec: ScenarioSpec, params: GeneratorParams) -> None:
    if params.c != spec.c:
        raise ValueError(f"c: params carry c={params.c} but scenario {spec.id} needs c={spec.c}")
    if params.s != spec.s:
        raise ValueError(f"s: params carry s={params.s} but scenario {spec.id} needs s={spec.s}")
    if not spec.g_active and np.any(params.g_noise != 0):
        raise ValueError(f"g_noise: scenario {spec.id} requires G = 0")
    if spec.w_latent_zero and np.any(params.w_latent != 0):
        raise ValueError(f"w_latent: scenario {spec.id} requires w_latent = 0")
    if not spec.observe_latent and params.d_latent == 0:
        raise ValueError("dims: hiding the latent block needs d_latent > 0")


def draw_shift(spec: ScenarioSpec, params: GeneratorParams, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal(params.dim)
    shift = params.s * (params.shift_mu + params.shift_sigma_diag * z)
    if spec.latent_shift_only:
        shift[: params.d_core] = 0.0
    return shift


def _labeled_set(spec, params, mean, n, rng) -> LabeledSet:
    x = mean + params.sigma_diag * rng.standard_normal((n, params.dim))
    scale = params.c + x @ params.g_noise
    y = x @ params.w_data + rng.standard_normal(n) * scale
    obs = x if spec.observe_latent else x[:, : params.d_core]
    hard = np.sum((x - params.mu) ** 2, axis=1)
    return LabeledSet(x, obs.copy(), y, np.abs(scale), hard)


def generate_scenario(
    spec: ScenarioSpec,
    params: GeneratorParams,
    n_train: int,
    n_val: int,
    n_test: int,
    rng: np.random.Generator,
    seed: Optional[int] = None,
) -> SyntheticBundle:
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if int(n) < 1:
            raise ValueError(f"{name}: must be >= 1, got {n}")
    _check_consistent(spec, params)
    streams = [substream(rng, i) for i in range(4)]
    shift = draw_shift(spec, params, streams[0]) if spec.s != 0 else np.zeros(params.dim)
    shifted = params.mu + shift
    train = _labeled_set(spec, params, params.mu, int(n_train), streams[1])
    val = _labeled_set(spec, params, shifted, int(n_val), streams[2])
    test = _labeled_set(spec, params, shifted, int(n_test), streams[3])
    return SyntheticBundle(train, val, test, params, spec, seed, shift)


def make_bundle(
    scenario_id: str,
    seed: int,
    n_train: int = 2000,
    n_val: int = 500,
    n_test: int = 1000,
    dims=(48, 24),
    s: Optional[float] = None,
) -> SyntheticBundle:
    """Sample a fresh world for ``scenario_id`` and draw its three splits."""
    spec = scenario_spec(scenario_id, s)
    params = adapt_params(spec, sample_generator_params(make_rng(seed, 0), dims))
    return generate_scenario(spec, params, n_train, n_val, n_test, make_rng(seed, 1), seed=seed)


def target_weight_features(spec: ScenarioSpec, params: GeneratorParams, x_batch) -> np.ndarray:
    """Per-instance regressors for the ideal weights of a scenario.

    S1 ``[1/|g.x|^2]``, S2 ``[1/|g.x|^2, h]``, S3 ``[1/(w_e' S_ee w_e)]``,
    S4 ``[1/(w_e' S_ee w_e), h]``, S5 ``[1]``. ``x_batch`` holds full
    (unmasked) inputs and ``h = ||x - mu||^2``. The squared noise scale is
    floored at ``1e-6``.
    """
    X = np.asarray(x_batch, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    n = X.shape[0]
    h = np.sum((X - params.mu) ** 2, axis=1)
    if spec.id in ("S1", "S2"):
        inv_noise = 1.0 / np.maximum((X @ params.g_noise) ** 2, FEATURE_FLOOR)
        cols = [inv_noise] if spec.id == "S1" else [inv_noise, h]
    elif spec.id in ("S3", "S4"):
        lat = np.full(n, 1.0 / max(params.latent_variance(), FEATURE_FLOOR))
        cols = [lat] if spec.id == "S3" else [lat, h]
    else:
        cols = [np.ones(n)]
    return np.column_stack(cols)


def generate_label_noise_task(
    seed: int,
    n_train: int = 2000,
    n_val: int = 500,
    n_test: int = 1000,
    dims=(48, 24),
    n_classes: int = 3,
    flip_scale: float = 0.2,
    max_flip: float = 0.4,
):
    """Linear multi-class task with instance-dependent label flips.

    Clean labels are ``argmax_k W_k.(x - mu)``. Each label (in every split)
    is replaced by a uniformly drawn different class with probability
    ``min(max_flip, flip_scale * |g.x| / sd(g.x))`` where ``sd(g.x)`` is the
    population standard deviation of ``g.x``.

    Returns a dict of splits, each ``(X, y, flip_prob)``, plus the params.
    """
    params = sample_generator_params(make_rng(seed, 0), dims)
    rng = make_rng(seed, 1)
    W = gaussian_sample(rng, 5.0, 10.0, params.dim * n_classes).reshape(params.dim, n_classes)
    sd = float(np.sqrt(np.sum(params.g_noise**2 * params.sigma_diag**2)))
    out = {"params": params, "class_weights": W}
    for name, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        X = params.mu + params.sigma_diag * rng.standard_normal((n, params.dim))
        clean = np.argmax((X - params.mu) @ W, axis=1)
        p = np.clip(flip_scale * np.abs(X @ params.g_noise) / sd, 0.0, max_flip)
        flip = rng.random(n) < p
        other = (clean + rng.integers(1, n_classes, size=n)) % n_classes
        out[name] = (X, np.where(flip, other, clean), p)
    return out


CSV_FMT = "%.17g"


def split_header(dim: int) -> str:
    return ",".join([f"x{i}" for i in range(dim)] + ["y", "noise_std", "hardness"])


def write_bundle(bundle: SyntheticBundle, out_dir) -> list:
    """Write ``train/val/test.csv`` and ``params.json``; returns the file names."""
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for name in ("train", "val", "test"):
        ls: LabeledSet = getattr(bundle, name)
        table = np.column_stack([ls.x_full, ls.y, ls.noise_std, ls.hardness])
        path = os.path.join(out_dir, f"{name}.csv")
        np.savetxt(path, table, fmt=CSV_FMT, delimiter=",", header=split_header(ls.x_full.shape[1]), comments="")
        files.append(f"{name}.csv")
    sidecar = {
        "params": bundle.params.to_dict(),
        "spec": asdict(bundle.spec),
        "seed": bundle.seed,
        "shift": None if bundle.shift is None else np.asarray(bundle.shift).tolist(),
    }
    with open(os.path.join(out_dir, "params.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
    files.append("params.json")
    return files


def read_bundle(data_dir) -> SyntheticBundle:
    with open(os.path.join(data_dir, "params.json"), encoding="utf-8") as fh:
        side = json.load(fh)
    params = GeneratorParams.from_dict(side["params"])
    spec = ScenarioSpec(**side["spec"])
    splits = {}
    for name in ("train", "val", "test"):
        path = os.path.join(data_dir, f"{name}.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing split file {path}")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        x = table[:, : params.dim]
        obs = x if spec.observe_latent else x[:, : params.d_core]
        splits[name] = LabeledSet(x, obs.copy(), table[:, params.dim], table[:, params.dim + 1], table[:, params.dim + 2])
    shift = None if side.get("shift") is None else np.asarray(side["shift"])
    return SyntheticBundle(splits["train"], splits["val"], splits["test"], params, spec, side.get("seed"), shift)
