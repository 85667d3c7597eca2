"""Command line round trips: every subcommand, every exit-code class."""

import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from deepcoder import cli, dataio, trainer


def small_config(tmp, **overrides):
    cfg = {
        "seed": 0,
        "synth": {"height": 16, "width": 16, "outputs": 2, "levels": 3,
                  "subjects": 3, "samples": 60, "seed": 5},
        "split": {"n_l": 20},
        "optimizer": {"batch_size": 10},
        "model": {"latent_z0": 8, "latent_z1": 4,
                  "conv_stages": [[4, 3, True]], "fc_width": 16},
        "gp": {"steps_per_epoch": 3},
        "warmup": {"alpha_epochs": 2, "beta_epochs": 2},
        "training": {"max_epochs": 3, "warm_start_epochs": 1, "tol": 0.0},
    }
    for section, val in overrides.items():
        if isinstance(val, dict):
            cfg.setdefault(section, {}).update(val)
        else:
            cfg[section] = val
    path = os.path.join(tmp, "cfg.json")
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return path


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Synth + train once; most tests only read the artifacts."""
    tmp = str(tmp_path_factory.mktemp("cli"))
    cfg = small_config(tmp)
    data = os.path.join(tmp, "ds")
    model = os.path.join(tmp, "model.bin")
    log = os.path.join(tmp, "log.csv")
    assert cli.main(["synth", "--config", cfg, "--out", data]) == 0
    assert cli.main(["train", "--data", data, "--config", cfg,
                     "--out", model, "--log", log]) == 0
    return {"tmp": tmp, "cfg": cfg, "data": data, "model": model,
            "log": log}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ synth

def test_synth_default_prints_documented_count(tmp_path, capsys):
    out = str(tmp_path / "ds")
    assert cli.main(["synth", "--out", out]) == 0
    line = capsys.readouterr().out
    assert "samples=1200" in line
    assert "outputs=3" in line
    assert "levels=[4, 4, 4]" in line


def test_synth_same_seed_identical_files(tmp_path, ws):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    for out in (a, b):
        assert cli.main(["synth", "--config", ws["cfg"], "--out", out,
                         "--seed", "11"]) == 0
    for name in ("images.f32", "labels.csv", "manifest.json"):
        with open(os.path.join(a, name), "rb") as fa, \
                open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read()


def test_synth_unwritable_path_exits_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    # parent is a file, directory creation must fail
    rc = cli.main(["synth", "--out", str(blocker / "ds")])
    assert rc == 2


# ------------------------------------------------------------ exit codes

def test_usage_errors_exit_1(ws):
    assert cli.main(["synth"]) == 1            # missing --out
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["infer", "--model", ws["model"], "--data", ws["data"],
                     "--index", "9999"]) == 1


def test_missing_model_exits_2(ws, tmp_path):
    rc = cli.main(["eval", "--model", str(tmp_path / "nope.bin"),
                   "--data", ws["data"],
                   "--report", str(tmp_path / "r.json")])
    assert rc == 2


def test_corrupt_checkpoint_exits_2(ws, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint at all")
    rc = cli.main(["eval", "--model", str(bad), "--data", ws["data"],
                   "--report", str(tmp_path / "r.json")])
    assert rc == 2


def test_diverging_train_exits_3(tmp_path):
    tmp = str(tmp_path)
    cfg = small_config(tmp, optimizer={"batch_size": 10,
                                       "learning_rate": 1e12})
    data = os.path.join(tmp, "ds")
    assert cli.main(["synth", "--config", cfg, "--out", data]) == 0
    with np.errstate(all="ignore"):
        rc = cli.main(["train", "--data", data, "--config", cfg,
                       "--out", os.path.join(tmp, "m.bin"),
                       "--log", os.path.join(tmp, "l.csv")])
    assert rc == 3


# ------------------------------------------------------------------ train

def test_train_log_rows_and_columns(ws):
    rows = read_csv(ws["log"])
    # 1 warm-start row + 3 joint rows
    assert len(rows) == 4
    assert list(rows[0].keys()) == trainer.HISTORY_COLUMNS
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2, 3]


def test_train_max_epochs_one_row_block(tmp_path, ws, capsys):
    tmp = str(tmp_path)
    cfg = small_config(tmp, training={"max_epochs": 1,
                                      "warm_start_epochs": 1, "tol": 0.0})
    log = os.path.join(tmp, "log.csv")
    assert cli.main(["train", "--data", ws["data"], "--config", cfg,
                     "--out", os.path.join(tmp, "m.bin"),
                     "--log", log]) == 0
    assert "stopped at max_epochs=1" in capsys.readouterr().out
    assert len(read_csv(log)) == 2  # warmup block + one joint row


def test_train_csv_ldc_sum_check(ws):
    for row in read_csv(ws["log"]):
        alpha = float(row["alpha"])
        beta = float(row["beta"])
        want = (alpha * float(row["L_kl_X"]) + float(row["L_r_X"])
                + (1.0 - alpha) * float(row["L_p_X"])
                + beta * float(row["L_kl_Z0"]) + float(row["L_r_Z0"])
                + float(row["L_o_Z0"]))
        assert abs(float(row["L_DC"]) - want) < 1e-9


def mask_wall(path):
    rows = read_csv(path)
    for row in rows:
        row["wall_seconds"] = ""
    return rows


def test_train_deterministic_rerun(ws, tmp_path):
    tmp = str(tmp_path)
    model2 = os.path.join(tmp, "m2.bin")
    log2 = os.path.join(tmp, "l2.csv")
    assert cli.main(["train", "--data", ws["data"], "--config", ws["cfg"],
                     "--out", model2, "--log", log2]) == 0
    assert mask_wall(ws["log"]) == mask_wall(log2)
    a = dataio.load_checkpoint(ws["model"])
    b = dataio.load_checkpoint(model2)
    for name, arr in a.vog.params.items():
        assert np.array_equal(arr, b.vog.params[name]), name
    for name, arr in a.vcae_params.items():
        assert np.array_equal(arr, b.vcae_params[name]), name


def test_train_resume_matches_straight_run(ws, tmp_path):
    tmp = str(tmp_path)
    cfg_short = small_config(tmp, training={"max_epochs": 1,
                                            "warm_start_epochs": 1,
                                            "tol": 0.0})
    half = os.path.join(tmp, "half.bin")
    assert cli.main(["train", "--data", ws["data"], "--config", cfg_short,
                     "--out", half,
                     "--log", os.path.join(tmp, "h.csv")]) == 0
    resumed = os.path.join(tmp, "resumed.bin")
    log_r = os.path.join(tmp, "r.csv")
    assert cli.main(["train", "--data", ws["data"], "--config", ws["cfg"],
                     "--resume", half, "--out", resumed,
                     "--log", log_r]) == 0
    assert mask_wall(log_r) == mask_wall(ws["log"])
    a = dataio.load_checkpoint(ws["model"])
    b = dataio.load_checkpoint(resumed)
    for name, arr in a.vog.params.items():
        assert np.array_equal(arr, b.vog.params[name]), name


# ------------------------------------------------------------------- eval

def test_eval_report_document(ws, tmp_path, capsys):
    report = str(tmp_path / "report.json")
    assert cli.main(["eval", "--model", ws["model"], "--data", ws["data"],
                     "--report", report]) == 0
    out = capsys.readouterr().out
    assert "avg_accuracy=" in out
    doc = json.load(open(report))
    assert doc["split"] == "R"
    assert doc["n_samples"] == 40  # 60 samples minus n_l = 20
    assert len(doc["per_output"]["accuracy"]) == 2
    accs = doc["per_output"]["accuracy"]
    assert abs(doc["average"]["accuracy"] - np.mean(accs)) < 1e-12


def test_eval_split_all_covers_everything(ws, tmp_path):
    report = str(tmp_path / "report.json")
    assert cli.main(["eval", "--model", ws["model"], "--data", ws["data"],
                     "--report", report, "--split", "all"]) == 0
    assert json.load(open(report))["n_samples"] == 60


# ------------------------------------------------------------------ infer

def test_infer_levels_and_recon_bytes(ws, tmp_path, capsys):
    recon = str(tmp_path / "rec.f32")
    assert cli.main(["infer", "--model", ws["model"], "--data", ws["data"],
                     "--index", "3", "--recon-out", recon]) == 0
    levels = [int(v) for v in capsys.readouterr().out.split()]
    assert len(levels) == 2
    assert all(1 <= v <= 3 for v in levels)
    assert os.path.getsize(recon) == 1 * 16 * 16 * 4

    state = dataio.load_checkpoint(ws["model"])
    ds = dataio.load_dataset(ws["data"])
    want_levels, want_recon = trainer.infer(
        state, ds.images[3].astype(np.float64))
    assert levels == [int(v) for v in want_levels]
    got = np.frombuffer(open(recon, "rb").read(), dtype="<f4")
    assert np.array_equal(got, want_recon.astype("<f4").ravel())


def test_infer_deterministic_rerun(ws, tmp_path, capsys):
    outs = []
    for name in ("a.f32", "b.f32"):
        recon = str(tmp_path / name)
        assert cli.main(["infer", "--model", ws["model"],
                         "--data", ws["data"], "--index", "0",
                         "--recon-out", recon]) == 0
        outs.append((capsys.readouterr().out,
                     open(recon, "rb").read()))
    assert outs[0] == outs[1]


# -------------------------------------------------------- export-latents

def test_export_latents_round_trip(ws, tmp_path):
    out = str(tmp_path / "latents.csv")
    assert cli.main(["export-latents", "--model", ws["model"],
                     "--data", ws["data"], "--out", out]) == 0
    rows = read_csv(out)
    assert len(rows) == 60
    assert len(rows[0]) == 2 + 4 + 8  # index, subject, Z_1 dims, Z_0 dims

    state = dataio.load_checkpoint(ws["model"])
    ds = dataio.load_dataset(ws["data"])
    from deepcoder import vcae, vogpae
    z0 = vcae.encode_mean(state.vcae_params, state.arch,
                          ds.images.astype(np.float64))
    z1 = vogpae.encode_new(state.vog, z0)
    for i in (0, 17, 59):
        got = np.array([float(rows[i][f"z1_{d}"]) for d in range(4)])
        assert np.array_equal(got, z1[i])
        assert int(rows[i]["subject"]) == int(ds.subjects[i])


# -------------------------------------------------------------- packaging

def test_module_entry_point_runs(tmp_path):
    cfg = small_config(str(tmp_path))
    proc = subprocess.run(
        [sys.executable, "-m", "deepcoder.cli", "synth", "--config", cfg,
         "--out", str(tmp_path / "ds")],
        capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0
    assert "samples=60" in proc.stdout
