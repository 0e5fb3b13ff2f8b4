"""Command-line driver: ``revar synth|train|eval|table1|sweep|replay``.

Every command reads a strict JSON config, writes its artifacts into
``--out`` and finishes with ``manifest.json``. Exit codes: 0 success,
2 configuration error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from revar import __version__
from revar import experiments as ex
from revar import synthgen as sg
from revar.bilevel import DivergenceError
from revar.estimators import ReVarClassifier, ReVarRegressor, load_checkpoint, save_checkpoint
from revar.seleval import (
    MetricsReport,
    auarc,
    config_digest,
    ece,
    rejection_curve,
    scenario_fit,
    selective_accuracy,
    selective_ece,
)

log = logging.getLogger("revar")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
FLOAT_FMT = "%.17g"
HISTORY_COLUMNS = ("epoch", "train_loss", "meta_loss", "weight_mean", "weight_sd")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# -- config handling -------------------------------------------------------

SYNTH_KEYS = {"scenario": None, "seed": 0, "n_train": 2000, "n_val": 500, "n_test": 1000, "dims": [48, 24], "s": None,
              "n_classes": 3, "flip_scale": 0.4, "max_flip": 0.4}
TRAIN_KEYS = {"data_dir": None, "task": "auto", "seed": 0, "model": {}}
EVAL_KEYS = {"checkpoint_dir": None, "data_dir": None, "score": "g", "split": "test", "n_bins": 15,
             "coverages": [0.5, 0.8]}
TABLE1_KEYS = {"seeds": [0, 1, 2, 3, 4], "scenarios": list(ex.TABLE1_SCENARIOS), "methods": list(ex.TABLE1_METHODS),
               "desk": {}}
SWEEP_KEYS = {"scenarios": ["S2", "S4"], "s_values": [5, 25, 50], "seeds": [0, 1, 2, 3, 4], "desk": {}}
DESK_KEYS = {"n_train", "n_val", "n_test", "dims", "worlds", "model"}
MODEL_KEYS = set(ReVarRegressor().get_params()) - {"random_state"}


def _strict(raw, defaults: dict, section: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section or 'config'}: expected a JSON object")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        where = f"{section}." if section else ""
        raise ConfigError(f"{where}{unknown[0]}: unknown config field")
    return {**json.loads(json.dumps(defaults)), **raw}


def _check_model(model, section: str) -> dict:
    if not isinstance(model, dict):
        raise ConfigError(f"{section}: expected a JSON object")
    unknown = sorted(set(model) - MODEL_KEYS)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown model setting")
    return model


def _desk(raw: dict) -> ex.DeskConfig:
    unknown = sorted(set(raw) - DESK_KEYS)
    if unknown:
        raise ConfigError(f"desk.{unknown[0]}: unknown config field")
    _check_model(raw.get("model", {}), "desk.model")
    try:
        return ex.DeskConfig(**raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"desk.{err}") from err


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config: not valid JSON ({err.msg} at line {err.lineno})") from err


def _seeds(value, field: str) -> list:
    if not isinstance(value, list) or not value or not all(isinstance(s, int) for s in value):
        raise ConfigError(f"{field}: expected a non-empty list of integer seeds")
    return value


# -- file helpers ----------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % float(v)
    return "" if v is None else str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c] if isinstance(r, dict) else r[i]) for i, c in enumerate(columns)])


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def load_split_table(data_dir, name):
    """Read ``<name>.csv`` with a header; returns (features, y, extra columns)."""
    path = os.path.join(data_dir, f"{name}.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing split file {path}")
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if "y" not in header:
        raise ConfigError(f"data: {path} has no 'y' column")
    meta_cols = {"y", "noise_std", "hardness", "flip_prob"}
    feat = [i for i, c in enumerate(header) if c not in meta_cols]
    extras = {c: table[:, i] for i, c in enumerate(header) if c in meta_cols and c != "y"}
    return table[:, feat], table[:, header.index("y")], extras


def load_data(data_dir):
    """Return ``{split: (X_observed, y)}`` and the synthetic bundle if there is one."""
    if os.path.exists(os.path.join(data_dir, "params.json")):
        b = sg.read_bundle(data_dir)
        return {n: (getattr(b, n).x_observed, getattr(b, n).y) for n in ("train", "val", "test")}, b
    out = {}
    for name in ("train", "val", "test"):
        if name == "test" and not os.path.exists(os.path.join(data_dir, "test.csv")):
            continue
        X, y, _ = load_split_table(data_dir, name)
        out[name] = (X, y)
    return out, None


# -- commands ---------------------------------------------------------------

def cmd_synth(cfg: dict, out_dir, seed=None) -> tuple:
    cfg = _strict(cfg, SYNTH_KEYS, "")
    if seed is not None:
        cfg["seed"] = seed
    sid = cfg["scenario"]
    if sid not in (*sg.SCENARIOS, "label_noise"):
        raise ConfigError(f"scenario: unknown scenario id {sid!r}")
    for k in ("n_train", "n_val", "n_test"):
        if not isinstance(cfg[k], int) or cfg[k] < 1:
            raise ConfigError(f"{k}: must be a positive integer")
    dims = tuple(cfg["dims"])
    os.makedirs(out_dir, exist_ok=True)
    if sid == "label_noise":
        task = sg.generate_label_noise_task(
            cfg["seed"], cfg["n_train"], cfg["n_val"], cfg["n_test"], dims, cfg["n_classes"], cfg["flip_scale"], cfg["max_flip"]
        )
        files = []
        for name in ("train", "val", "test"):
            X, y, p = task[name]
            cols = [f"x{i}" for i in range(X.shape[1])] + ["y", "flip_prob"]
            table = np.column_stack([X, y, p])
            np.savetxt(os.path.join(out_dir, f"{name}.csv"), table, fmt=FLOAT_FMT, delimiter=",",
                       header=",".join(cols), comments="")
            files.append(f"{name}.csv")
        write_json(os.path.join(out_dir, "task.json"), {"kind": "label_noise", "params": task["params"].to_dict(),
                                                         "class_weights": task["class_weights"]})
        files.append("task.json")
        return cfg, files, {}
    try:
        b = sg.make_bundle(sid, cfg["seed"], cfg["n_train"], cfg["n_val"], cfg["n_test"], dims, cfg["s"])
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return cfg, sg.write_bundle(b, out_dir), {}


def _task_kind(cfg_task, data_dir, y):
    if cfg_task in ("regression", "classification"):
        return cfg_task
    if cfg_task != "auto":
        raise ConfigError("task: must be 'auto', 'regression' or 'classification'")
    if os.path.exists(os.path.join(data_dir, "task.json")):
        return "classification"
    return "regression"


def cmd_train(cfg: dict, out_dir, seed=None, data_dir=None, checkpoint_dir=None) -> tuple:
    cfg = _strict(cfg, {**TRAIN_KEYS, "resume_from": None}, "")
    if seed is not None:
        cfg["seed"] = seed
    if data_dir is not None:
        cfg["data_dir"] = data_dir
    if checkpoint_dir is not None:
        cfg["resume_from"] = checkpoint_dir
    if not cfg["data_dir"]:
        raise ConfigError("data_dir: required (config field or --data)")
    model = _check_model(cfg["model"], "model")
    splits, _ = load_data(cfg["data_dir"])
    (X, y), (Xv, yv) = splits["train"], splits["val"]
    kind = _task_kind(cfg["task"], cfg["data_dir"], y)
    inputs = _digests(cfg["data_dir"])
    if cfg["resume_from"]:
        est = load_checkpoint(cfg["resume_from"])
        est.set_params(warm_start=True, **model)
        inputs.update(_digests(cfg["resume_from"], prefix="checkpoint/"))
    else:
        cls = ReVarClassifier if kind == "classification" else ReVarRegressor
        try:
            est = cls(random_state=cfg["seed"], **model)
        except TypeError as err:
            raise ConfigError(f"model: {err}") from err
    try:
        est.fit(X, y, Xv, yv)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    est.set_params(warm_start=False)
    os.makedirs(out_dir, exist_ok=True)
    files = save_checkpoint(est, out_dir)
    write_csv(os.path.join(out_dir, "history.csv"), HISTORY_COLUMNS, est.history_)
    files.append("history.csv")
    return cfg, files, inputs


def _digests(directory, prefix="") -> dict:
    out = {}
    for name in sorted(os.listdir(directory)):
        p = os.path.join(directory, name)
        if os.path.isfile(p) and name != "manifest.json":
            out[prefix + name] = file_digest(p)
    return out


def cmd_eval(cfg: dict, out_dir, seed=None, data_dir=None, checkpoint_dir=None) -> tuple:
    cfg = _strict(cfg, EVAL_KEYS, "")
    if data_dir is not None:
        cfg["data_dir"] = data_dir
    if checkpoint_dir is not None:
        cfg["checkpoint_dir"] = checkpoint_dir
    for k in ("data_dir", "checkpoint_dir"):
        if not cfg[k]:
            raise ConfigError(f"{k}: required")
    if cfg["score"] not in ("g", "sr", "entropy", "mcd"):
        raise ConfigError(f"score: unknown score kind {cfg['score']!r}")
    if cfg["split"] not in ("train", "val", "test"):
        raise ConfigError("split: must be train, val or test")
    est = load_checkpoint(cfg["checkpoint_dir"])
    if seed is not None:
        est.set_params(random_state=seed)
    splits, bundle = load_data(cfg["data_dir"])
    if cfg["split"] not in splits:
        raise FileNotFoundError(f"missing split file {cfg['split']}.csv")
    X, y = splits[cfg["split"]]
    if X.shape[1] != est.n_features_in_:
        raise ConfigError(f"data_dir: {X.shape[1]} features but the checkpoint expects {est.n_features_in_}")
    inputs = {**_digests(cfg["data_dir"], "data/"), **_digests(cfg["checkpoint_dir"], "checkpoint/")}
    report = MetricsReport(seed=int(est.random_state), config_digest=config_digest(cfg), score_kind=cfg["score"])
    os.makedirs(out_dir, exist_ok=True)
    files = []
    if isinstance(est, ReVarRegressor):
        if cfg["score"] != "g":
            raise ConfigError(f"score: unsupported score {cfg['score']!r} for a regression model")
        if est.meta_ is None:
            raise ConfigError("score: unsupported, this checkpoint has no weight network")
        if bundle is None or bundle.spec.id in ("S3", "S4"):
            raise ConfigError("data_dir: weight fits need a single-world S1, S2 or S5 bundle")
        w = est.instance_weights(bundle.train.x_observed, bundle.train.y)
        fit = scenario_fit(bundle, w)
        report.r2_by_scenario = {bundle.spec.id: fit.r2}
        report.spearman_by_scenario = {bundle.spec.id: fit.spearman}
        write_csv(os.path.join(out_dir, "weights.csv"), ("index", "weight"), [(i, v) for i, v in enumerate(w)])
        files.append("weights.csv")
    else:
        if cfg["score"] == "g" and est.meta_ is None:
            raise ConfigError("score: unsupported, g-scores need a trained weight network")
        probs = est.predict_proba(X)
        correct = est.predict(X) == y.astype(est.classes_.dtype)
        u = est.uncertainty(X, cfg["score"], y)
        curve = rejection_curve(u, correct, score_kind=cfg["score"])
        conf = probs.max(axis=1)
        report.auarc = auarc(curve)
        report.ece = ece(conf, correct, cfg["n_bins"])
        for c in cfg["coverages"]:
            key = repr(float(c))
            report.selective_accuracy[key] = selective_accuracy(u, correct, c)
            report.selective_ece[key] = selective_ece(conf, correct, u, c, cfg["n_bins"])
        write_csv(os.path.join(out_dir, "curve.csv"), ("coverage", "accuracy"), curve.to_rows())
        files.append("curve.csv")
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    files.append("metrics.json")
    return cfg, files, inputs


def _workers() -> int:
    raw = os.environ.get("REVAR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as err:
        raise ConfigError(f"REVAR_THREADS: expected an integer, got {raw!r}") from err


def _fan_out(fn, jobs):
    """Run ``fn(*job)`` for every job; results come back in job order."""
    n = min(_workers(), len(jobs))
    if n <= 1:
        return [fn(*j) for j in jobs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda j: fn(*j), jobs))


TABLE1_COLUMNS = ["seed", "scenario"] + [f"{k}_{m}" for k in ("r2", "spearman", "cv") for m in ex.TABLE1_METHODS] + ["ordered"]
SUMMARY_COLUMNS = (["scenario"] + [f"r2_{m}" for m in ex.TABLE1_METHODS]
                   + [f"reference_{m}" for m in ex.TABLE1_METHODS] + ["ordered_seeds", "n_seeds"])


def cmd_table1(cfg: dict, out_dir, seed=None, **_) -> tuple:
    cfg = _strict(cfg, TABLE1_KEYS, "")
    if seed is not None:
        cfg["seeds"] = [seed]
    seeds = _seeds(cfg["seeds"], "seeds")
    desk = _desk(cfg["desk"])
    for sid in cfg["scenarios"]:
        if sid not in ex.TABLE1_SCENARIOS:
            raise ConfigError(f"scenarios: unknown scenario id {sid!r}")
    if sorted(cfg["methods"]) != sorted(ex.TABLE1_METHODS):
        raise ConfigError(f"methods: the table compares exactly {list(ex.TABLE1_METHODS)}")
    jobs = [(sid, s) for s in seeds for sid in cfg["scenarios"]]
    rows = _fan_out(lambda sid, s: ex.table1_row(sid, s, desk), jobs)
    summary = ex.summarize_table1(rows, cfg["scenarios"])
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "table1.csv"), TABLE1_COLUMNS, rows)
    write_csv(os.path.join(out_dir, "table1_summary.csv"), SUMMARY_COLUMNS, summary)
    cfg["desk"] = desk.to_dict()
    return cfg, ["table1.csv", "table1_summary.csv"], {}


SWEEP_COLUMNS = ("scenario", "seed", "s", "lambda1", "lambda2", "share", "r2")


def cmd_sweep(cfg: dict, out_dir, seed=None, **_) -> tuple:
    cfg = _strict(cfg, SWEEP_KEYS, "")
    if seed is not None:
        cfg["seeds"] = [seed]
    seeds = _seeds(cfg["seeds"], "seeds")
    desk = _desk(cfg["desk"])
    for sid in cfg["scenarios"]:
        if sid not in ("S2", "S4"):
            raise ConfigError(f"scenarios: shift sweeps are defined for S2 and S4, not {sid!r}")
    try:
        jobs = [(sid, s) for sid in cfg["scenarios"] for s in seeds]
        results = _fan_out(lambda sid, s: ex.shift_sweep(sid, cfg["s_values"], s, desk), jobs)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    rows = [r for res in results for r in res]
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "sweep.csv"), SWEEP_COLUMNS, rows)
    flags = [{"scenario": sid, "seed": s, "increasing": ex.strictly_increasing([r["share"] for r in res])}
             for (sid, s), res in zip(jobs, results)]
    write_csv(os.path.join(out_dir, "sweep_monotone.csv"), ("scenario", "seed", "increasing"), flags)
    cfg["desk"] = desk.to_dict()
    return cfg, ["sweep.csv", "sweep_monotone.csv"], {}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "table1": cmd_table1, "sweep": cmd_sweep}


def run_command(command: str, cfg: dict, out_dir, seed=None, data_dir=None, checkpoint_dir=None) -> dict:
    """Run one command and write its manifest; returns the manifest."""
    t0 = time.perf_counter()
    fn = COMMANDS[command]
    kwargs = {}
    if command in ("train", "eval"):
        kwargs = {"data_dir": data_dir, "checkpoint_dir": checkpoint_dir}
    resolved, files, inputs = fn(cfg, out_dir, seed, **kwargs)
    manifest = {
        "command": command,
        "config": resolved,
        "seed": resolved.get("seed", resolved.get("seeds")),
        "version": __version__,
        "inputs": inputs,
        "outputs": {f: file_digest(os.path.join(out_dir, f)) for f in files},
        "duration_seconds": time.perf_counter() - t0,
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def replay(manifest_path, out_dir) -> dict:
    """Re-run the command recorded in a manifest into ``out_dir``."""
    with open(manifest_path, encoding="utf-8") as fh:
        m = json.load(fh)
    for k in ("command", "config"):
        if k not in m:
            raise ConfigError(f"{k}: missing from manifest")
    if m["command"] not in COMMANDS:
        raise ConfigError(f"command: unknown command {m['command']!r}")
    return run_command(m["command"], m["config"], out_dir)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="revar", description="Learned instance reweighting experiments.")
    p.add_argument("--version", action="version", version=f"revar {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        if name in ("train", "eval"):
            sp.add_argument("--data")
            sp.add_argument("--checkpoint")
    rp = sub.add_parser("replay")
    rp.add_argument("--manifest", required=True)
    rp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "replay":
            replay(args.manifest, args.out)
        else:
            cfg = load_config(args.config)
            extra = {}
            if args.command in ("train", "eval"):
                extra = {"data_dir": args.data, "checkpoint_dir": args.checkpoint}
            run_command(args.command, cfg, args.out, args.seed, **extra)
    except ConfigError as err:
        print(f"revar: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as err:
        print(f"revar: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"revar: diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"revar: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
