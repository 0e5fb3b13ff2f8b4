import json
import os

import numpy as np
import pytest

from revar import cli

SMALL_DESK = {"n_train": 120, "n_val": 40, "n_test": 40, "dims": [6, 3], "worlds": 4,
              "model": {"epochs": 3, "warm_start_epochs": 1}}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(tmp_path, *argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def s1_data(tmp_path):
    cfg = write(tmp_path / "synth.json", {"scenario": "S1", "n_train": 100, "n_val": 30, "n_test": 30})
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def outputs_equal(a, b, names):
    return all((a / n).read_bytes() == (b / n).read_bytes() for n in names)


def test_synth_format_and_determinism(tmp_path, s1_data):
    lines = (s1_data / "train.csv").read_text().splitlines()
    assert lines[0] == ",".join([f"x{i}" for i in range(72)] + ["y", "noise_std", "hardness"])
    assert len(lines) == 101
    cfg = str(tmp_path / "synth.json")
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert outputs_equal(s1_data, tmp_path / "again", ["train.csv", "val.csv", "test.csv", "params.json"])
    m = json.loads((s1_data / "manifest.json").read_text())
    assert m["command"] == "synth" and m["seed"] == 0 and set(m["outputs"]) == {"train.csv", "val.csv", "test.csv", "params.json"}
    assert "duration_seconds" in m and m["version"]


@pytest.mark.parametrize(
    "cfg, field",
    [({"scenario": "S9"}, "scenario"), ({"scenario": "S1", "n_trian": 5}, "n_trian"), ({"scenario": "S1", "n_val": 0}, "n_val")],
)
def test_synth_config_errors(tmp_path, capsys, cfg, field):
    code = cli.main(["synth", "--config", write(tmp_path / "c.json", cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert field in capsys.readouterr().err


def test_invalid_json_and_missing_file(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert cli.main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 4


def test_train_erm_history_rows(tmp_path, s1_data):
    cfg = write(tmp_path / "t.json", {"model": {"method": "erm", "epochs": 4, "warm_start_epochs": 1}})
    assert cli.main(["train", "--config", cfg, "--data", str(s1_data), "--out", str(tmp_path / "ck")]) == 0
    rows = (tmp_path / "ck" / "history.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,meta_loss,weight_mean,weight_sd"
    assert len(rows) == 5


def test_train_revar_weights_spread_and_resume(tmp_path, s1_data):
    cfg = write(tmp_path / "t.json", {"model": {"epochs": 4, "warm_start_epochs": 1, "lr_meta": 1.0, "meta_interval": 1}})
    assert cli.main(["train", "--config", cfg, "--data", str(s1_data), "--out", str(tmp_path / "ck")]) == 0
    hist = (tmp_path / "ck" / "history.csv").read_text().splitlines()[1:]
    sd = [float(r.split(",")[4]) for r in hist]
    assert sd[0] == 0.0 and sd[-1] > 0.0
    zero = write(tmp_path / "z.json", {"model": {"epochs": 0}})
    assert cli.main(["train", "--config", zero, "--data", str(s1_data), "--checkpoint", str(tmp_path / "ck"),
                     "--out", str(tmp_path / "ck2")]) == 0
    assert outputs_equal(tmp_path / "ck", tmp_path / "ck2", ["classifier.json", "meta.json"])


def test_train_errors(tmp_path, s1_data):
    cfg = write(tmp_path / "t.json", {"model": {"epochs": 2, "warm_start_epochs": 0}})
    assert cli.main(["train", "--config", cfg, "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 4
    bad = write(tmp_path / "b.json", {"model": {"lr_metaa": 1.0}})
    assert cli.main(["train", "--config", bad, "--data", str(s1_data), "--out", str(tmp_path / "o")]) == 2
    os.remove(s1_data / "val.csv")
    assert cli.main(["train", "--config", cfg, "--data", str(s1_data), "--out", str(tmp_path / "o")]) == 4


def test_divergence_exit_code(tmp_path, s1_data):
    cfg = write(tmp_path / "t.json", {"model": {"method": "erm", "epochs": 100, "warm_start_epochs": 0, "lr": 1000.0,
                                                "standardize": False}})
    assert cli.main(["train", "--config", cfg, "--data", str(s1_data), "--out", str(tmp_path / "o")]) == 3


@pytest.fixture
def label_noise_run(tmp_path):
    cfg = write(tmp_path / "s.json", {"scenario": "label_noise", "n_train": 200, "n_val": 60, "n_test": 80, "dims": [2, 1]})
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "ln")]) == 0
    t = write(tmp_path / "t.json", {"model": {"epochs": 3, "warm_start_epochs": 1, "lr_meta": 1.0, "meta_interval": 1}})
    assert cli.main(["train", "--config", t, "--data", str(tmp_path / "ln"), "--out", str(tmp_path / "ck")]) == 0
    return tmp_path


@pytest.mark.parametrize("score", ["g", "sr", "entropy", "mcd"])
def test_eval_classifier_scores_deterministic(label_noise_run, score):
    tmp = label_noise_run
    cfg = write(tmp / f"e_{score}.json", {"score": score})
    args = ["eval", "--config", cfg, "--data", str(tmp / "ln"), "--checkpoint", str(tmp / "ck")]
    assert cli.main(args + ["--out", str(tmp / "e1")]) == 0
    assert cli.main(args + ["--out", str(tmp / "e2")]) == 0
    assert outputs_equal(tmp / "e1", tmp / "e2", ["curve.csv", "metrics.json"])
    rows = (tmp / "e1" / "curve.csv").read_text().splitlines()
    assert rows[0] == "coverage,accuracy" and len(rows) == 21
    rep = json.loads((tmp / "e1" / "metrics.json").read_text())
    assert 0 <= rep["auarc"] <= 1 and rep["score_kind"] == score


def test_eval_mcd_on_regressor_unsupported(tmp_path, s1_data, capsys):
    t = write(tmp_path / "t.json", {"model": {"epochs": 2, "warm_start_epochs": 1}})
    assert cli.main(["train", "--config", t, "--data", str(s1_data), "--out", str(tmp_path / "ck")]) == 0
    e = write(tmp_path / "e.json", {"score": "mcd"})
    code = cli.main(["eval", "--config", e, "--data", str(s1_data), "--checkpoint", str(tmp_path / "ck"), "--out", str(tmp_path / "ev")])
    assert code == 2 and "unsupported" in capsys.readouterr().err
    g = write(tmp_path / "g.json", {"score": "g"})
    assert cli.main(["eval", "--config", g, "--data", str(s1_data), "--checkpoint", str(tmp_path / "ck"), "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert "S1" in rep["r2_by_scenario"] and rep["auarc"] is None


def test_table1_shape_and_replay(tmp_path):
    cfg = write(tmp_path / "t1.json", {"seeds": [0], "desk": SMALL_DESK})
    assert cli.main(["table1", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    rows = (tmp_path / "a" / "table1_summary.csv").read_text().splitlines()
    header = rows[0].split(",")
    assert len(rows) == 6
    assert [h for h in header if h.startswith("r2_")] == ["r2_mwn", "r2_ibr", "r2_revar"]
    assert rows[1].split(",")[header.index("reference_revar")] == "0.83999999999999997"
    full = (tmp_path / "a" / "table1.csv").read_text().splitlines()
    assert full[0].endswith("ordered") and len(full) == 6
    assert cli.main(["replay", "--manifest", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    assert outputs_equal(tmp_path / "a", tmp_path / "b", ["table1.csv", "table1_summary.csv"])
    m1 = json.loads((tmp_path / "a" / "manifest.json").read_text())
    m2 = json.loads((tmp_path / "b" / "manifest.json").read_text())
    m1.pop("duration_seconds"), m2.pop("duration_seconds")
    assert m1 == m2


def test_table1_bad_desk_field(tmp_path, capsys):
    cfg = write(tmp_path / "t1.json", {"seeds": [0], "desk": {"wrlds": 3}})
    assert cli.main(["table1", "--config", cfg, "--out", str(tmp_path / "a")]) == 2
    assert "wrlds" in capsys.readouterr().err


def test_sweep_threads_do_not_change_output(tmp_path, monkeypatch):
    cfg = write(tmp_path / "sw.json", {"seeds": [0, 1], "scenarios": ["S2"], "desk": SMALL_DESK})
    monkeypatch.setenv("REVAR_THREADS", "1")
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("REVAR_THREADS", "2")
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert outputs_equal(tmp_path / "a", tmp_path / "b", ["sweep.csv", "sweep_monotone.csv"])
    rows = (tmp_path / "a" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "scenario,seed,s,lambda1,lambda2,share,r2" and len(rows) == 7


def test_replay_every_command_byte_identical(tmp_path, label_noise_run):
    tmp = label_noise_run
    e = write(tmp / "e.json", {"score": "g"})
    assert cli.main(["eval", "--config", e, "--data", str(tmp / "ln"), "--checkpoint", str(tmp / "ck"), "--out", str(tmp / "ev")]) == 0
    for d in ("ln", "ck", "ev"):
        m = json.loads((tmp / d / "manifest.json").read_text())
        assert cli.main(["replay", "--manifest", str(tmp / d / "manifest.json"), "--out", str(tmp / f"{d}_r")]) == 0
        assert outputs_equal(tmp / d, tmp / f"{d}_r", list(m["outputs"]))
