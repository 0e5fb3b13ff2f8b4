"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 to 8 train many desk-scale models and share module-scoped
results; expect the whole file to take several minutes on one core.
"""

import json
import time

import numpy as np
import pytest

from revar import bilevel, cli, mcvar, nets
from revar import experiments as ex
from revar import metanet as mn
from revar import seleval as se
from revar.bilevel import TrainConfig
from revar.mcvar import McConfig
from revar.numkit import make_rng

from conftest import fd_grad, rel_err
from test_bilevel import reference_sgd, regression_data, small_problem

SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


def test_c01_hypergradient_matches_finite_differences(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        kind = "softmax" if seed % 2 else "linear"
        theta, meta, batch, val, r = small_problem(500 + seed, kind)
        assert theta.params.size + meta.params.size <= 50
        cfg = McConfig(3, 0.3, 1.0)
        masks = mcvar.sample_mc_masks(theta, len(val[0]), cfg, r)
        a = bilevel.meta_gradient(theta, batch, val, meta, cfg, 0.5, masks=masks)
        b = bilevel.meta_gradient_fd(theta, batch, val, meta, cfg, 0.5, step=1e-5, masks=masks)
        worst = max(worst, rel_err(a, b))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-4 and secs < 10
    assert report(1, ok, f"max rel err {worst:.2e} (<= 1e-4), {secs:.2f}s (< 10s)")


def _grad_case(seed):
    r = make_rng(900 + seed)
    kind = "softmax" if seed % 2 else "linear"
    n_in = int(r.integers(2, 5))
    hidden = tuple(int(h) for h in r.integers(2, 6, size=int(r.integers(1, 3))))
    n_out = int(r.integers(2, 4)) if kind == "softmax" else 1
    net = nets.init_net((n_in, *hidden, n_out), r, kind)
    net = net.with_params(net.params + 0.1 * r.standard_normal(net.params.size))
    x = r.standard_normal(n_in)
    y = int(r.integers(0, n_out)) if kind == "softmax" else float(r.standard_normal())
    meta = mn.init_metanet(n_in, r, hidden=hidden, zero_last=False)
    meta = meta.with_params(meta.params + 0.3 * r.standard_normal(meta.params.size))
    return net, meta, x, y


def test_c02_gradient_suite(report):
    worst_net = worst_meta = 0.0
    for seed in range(50):
        net, meta, x, y = _grad_case(seed)
        num = fd_grad(lambda p: nets.loss(net.with_params(p), x, y), net.params)
        worst_net = max(worst_net, rel_err(nets.grad(net, x, y), num))
        num = fd_grad(lambda p: mn.weight_of(meta.with_params(p), x), meta.params)
        worst_meta = max(worst_meta, rel_err(mn.grad_weight(meta, x), num))
    ok = max(worst_net, worst_meta) <= 1e-4
    assert report(2, ok, f"nets.grad {worst_net:.2e}, grad_weight {worst_meta:.2e} (<= 1e-4)")


def test_c03_variance_oracle(report):
    theta, x, rate = 1.5, 2.0, 0.2
    q = 1.0 - rate
    unit = nets.NetParams((1, 1, 1), np.array([1.0, 0.0, theta, 0.0]), "linear", rate)
    expected = q * (1 - q) * (theta * x) ** 2
    est = mcvar.dropout_variance(unit, [x], McConfig(10**4, rate), make_rng(3))
    gap = abs(est - expected) / expected
    net = nets.init_net((3, 8, 2), make_rng(4), "softmax", 0.3)
    ones = nets.DropoutMask([np.ones((10, 8))], 0.7)
    zero = mcvar.dropout_variance(net, np.ones(3), McConfig(10, 0.3), masks=ones)
    ok = gap <= 0.02 and zero == 0.0
    assert report(3, ok, f"Bernoulli gap {gap:.4f} (<= 0.02), identical masks {zero}")


def test_c04_metric_oracles(report):
    c = se.rejection_curve([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0], [0.25, 0.5, 0.75, 1.0])
    acc_err = float(np.max(np.abs(c.accuracies - [1, 1, 2 / 3, 0.5])))
    auarc_err = abs(se.auarc(c) - 0.7916666666666666)
    ece_err = abs(se.ece([0.6, 0.6, 0.9, 0.9], [1, 0, 1, 1], n_bins=[0.5, 0.75, 1.0]) - 0.10)
    ok = max(acc_err, auarc_err, ece_err) <= 1e-12
    assert report(4, ok, f"curve {acc_err:.1e}, AUARC {auarc_err:.1e}, ECE {ece_err:.1e} (<= 1e-12)")


@pytest.fixture(scope="module")
def table1_result():
    return ex.table1(SEEDS)


@pytest.mark.slow
def test_c05_weight_fit_table(report, table1_result):
    res = table1_result
    summary = {r["scenario"]: r for r in res["summary"]}
    parts, ok = [], res["seconds"] <= 600
    for sid in ("S1", "S2", "S3", "S4"):
        rec = summary[sid]
        ok &= rec["ordered_seeds"] >= 4 and rec["r2_revar"] >= 0.6
        parts.append(f"{sid}: ordered {rec['ordered_seeds']}/5 R2 {rec['r2_revar']:.3f}/{rec['r2_ibr']:.3f}/{rec['r2_mwn']:.3f}")
    detail = "; ".join(parts) + f"; {res['seconds']:.0f}s (<= 600s)"
    assert report(5, ok, detail)


@pytest.mark.slow
def test_c06_shift_sweep(report):
    parts, ok = [], True
    for sid in ("S2", "S4"):
        shares = [[r["share"] for r in ex.shift_sweep(sid, [5, 25, 50], seed)] for seed in SEEDS]
        hits = sum(ex.strictly_increasing(s) for s in shares)
        ok &= hits >= 4
        parts.append(f"{sid}: increasing {hits}/5")
    assert report(6, ok, "; ".join(parts))


@pytest.mark.slow
def test_c07_s5_uniformity(report):
    res = [ex.uniformity(seed) for seed in SEEDS]
    cv5 = float(np.mean([r["cv_s5"] for r in res]))
    cv1 = float(np.mean([r["cv_s1"] for r in res]))
    per_seed = sum(r["cv_s5"] < 0.5 * r["cv_s1"] for r in res)
    ok = cv5 < 0.5 * cv1
    assert report(7, ok, f"mean CV S5 {cv5:.3f} vs S1 {cv1:.3f} (need < half); per seed {per_seed}/5")


@pytest.mark.slow
def test_c08_label_noise_selective(report):
    res = [ex.label_noise_auarc(seed) for seed in SEEDS]
    wins = sum(r["auarc_g"] > r["auarc_sr"] and r["auarc_g"] > r["auarc_mcd"] for r in res)
    means = {k: float(np.mean([r[k] for r in res])) for k in ("auarc_g", "auarc_sr", "auarc_mcd")}
    detail = f"g wins {wins}/5; mean AUARC g {means['auarc_g']:.4f} SR {means['auarc_sr']:.4f} MCD {means['auarc_mcd']:.4f}"
    assert report(8, wins >= 4, detail)


DESK = {"n_train": 120, "n_val": 40, "n_test": 40, "dims": [6, 3], "worlds": 4,
        "model": {"epochs": 3, "warm_start_epochs": 1}}


def _cli_twice(tmp_path, name, argv_for):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / f"{name}_{run}"
        assert cli.main([str(a) for a in argv_for(out)]) == 0
        outs.append(out)
    names = json.loads((outs[0] / "manifest.json").read_text())["outputs"]
    return all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names), outs[0]


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_c09_cli_determinism(report, tmp_path):
    synth = _write(tmp_path / "s.json", {"scenario": "label_noise", "n_train": 150, "n_val": 50, "n_test": 60, "dims": [2, 1]})
    train = _write(tmp_path / "t.json", {"model": {"epochs": 3, "warm_start_epochs": 1}})
    evalc = _write(tmp_path / "e.json", {"score": "g"})
    t1 = _write(tmp_path / "t1.json", {"seeds": [0], "scenarios": ["S1", "S3"], "desk": DESK})
    sw = _write(tmp_path / "sw.json", {"seeds": [0], "scenarios": ["S2"], "desk": DESK})
    same = {}
    same["synth"], data = _cli_twice(tmp_path, "synth", lambda o: ["synth", "--config", synth, "--out", o])
    same["train"], ck = _cli_twice(tmp_path, "train", lambda o: ["train", "--config", train, "--data", data, "--out", o])
    same["eval"], _ = _cli_twice(
        tmp_path, "eval", lambda o: ["eval", "--config", evalc, "--data", data, "--checkpoint", ck, "--out", o]
    )
    same["table1"], t1_dir = _cli_twice(tmp_path, "table1", lambda o: ["table1", "--config", t1, "--out", o])
    same["sweep"], _ = _cli_twice(tmp_path, "sweep", lambda o: ["sweep", "--config", sw, "--out", o])
    same["replay"], _ = _cli_twice(tmp_path, "replay", lambda o: ["replay", "--manifest", t1_dir / "manifest.json", "--out", o])
    ok = all(same.values())
    assert report(9, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


def test_c10_erm_and_ibr_reductions(report):
    data = regression_data(21)
    cfg = TrainConfig(method="erm", epochs=5, warm_start_epochs=1, batch_train=32, seed=5, lr_classifier=0.05)
    erm_ok = np.array_equal(bilevel.train(data, cfg).classifier.params, reference_sgd(data, cfg))
    common = dict(epochs=5, warm_start_epochs=1, batch_train=16, meta_interval=1, lr_meta=1.0, seed=6)
    ibr = bilevel.train(data, TrainConfig(method="ibr", **common))
    rv = bilevel.train(data, TrainConfig(method="revar", mc=McConfig(reg_weight=0.0), **common))
    ibr_ok = np.array_equal(ibr.classifier.params, rv.classifier.params) and np.array_equal(ibr.meta.params, rv.meta.params)
    assert report(10, erm_ok and ibr_ok, f"ERM vs reference SGD {'bit-identical' if erm_ok else 'DIFFERS'}, "
                  f"IBR vs ReVar(gamma=0) {'bit-identical' if ibr_ok else 'DIFFERS'}")
