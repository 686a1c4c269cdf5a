import json
import os
import shutil
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from pointjem.cli import EXIT_OK, EXIT_USAGE, main
from pointjem.dataio import read_manifest, read_xyz, write_xyz
from pointjem.metrics import REPORT_SCHEMA


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_config(path, manifest, **train):
    base = {"epochs": 1, "batch_size": 8, "point_widths": [8], "sgld": {"n_steps": 2}, "seed": 1,
            "checkpoint_every": 1}
    base.update(train)
    doc = {"schema_version": 1, "dataset": {"manifest": str(manifest)}, "train": base}
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small synthetic dataset plus one trained model shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["dataset", "--synthetic", "3", "--per-class", "6", "--points", "32", "--seed", "2",
                 "--out", str(root / "data")]) == 0
    cfg = write_config(root / "run.json", root / "data" / "manifest.json")
    assert main(["train", str(cfg), "--out", str(root / "run")]) == 0
    return root


# dataset

def test_dataset_counts(tmp_path, capsys):
    code, out, _ = run(capsys, "dataset", "--synthetic", 4, "--per-class", 200, "--points", 256,
                       "--seed", 7, "--out", tmp_path)
    assert code == EXIT_OK
    assert len(list((tmp_path / "clouds").rglob("*.xyz"))) == 800
    doc = read_manifest(tmp_path / "manifest.json")
    assert doc["class_names"] == ["sphere", "cube", "cylinder", "torus"]
    assert len(doc["splits"]["train"]) == 640 and len(doc["splits"]["test"]) == 160
    assert len((tmp_path / "train.txt").read_text().splitlines()) == 640
    assert "800 clouds" in out
    assert read_xyz(tmp_path / doc["splits"]["test"][0]["file"]).shape == (256, 3)


def test_dataset_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        run(capsys, "dataset", "--synthetic", 2, "--per-class", 3, "--points", 16, "--seed", 4,
            "--out", tmp_path / d)
    fa = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.xyz"))
    for f in fa:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_dataset_missing_off_dir(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    code, _, err = run(capsys, "dataset", "--off-dir", missing, "--out", tmp_path / "o")
    assert code == EXIT_USAGE
    assert str(missing) in err


def test_dataset_off_ingestion(tmp_path, capsys):
    quad = "OFF\n4 2 0\n0 0 0\n1 0 0\n1 1 0\n0 1 1\n3 0 1 2\n3 0 2 3\n"
    for cls in ("chair", "desk"):
        for split in ("train", "test"):
            d = tmp_path / "off" / cls / split
            d.mkdir(parents=True)
            (d / f"{cls}_{split}.off").write_text(quad)
    code, _, _ = run(capsys, "dataset", "--off-dir", tmp_path / "off", "--out", tmp_path / "o")
    assert code == EXIT_OK
    doc, ds = read_manifest(tmp_path / "o" / "manifest.json", "train")
    assert doc["n_points"] == 2048 and doc["class_names"] == ["chair", "desk"]
    assert ds.clouds.shape == (2, 2048, 3)


def test_dataset_malformed_off(tmp_path, capsys):
    d = tmp_path / "off" / "a"
    d.mkdir(parents=True)
    (d / "x.off").write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 9\n")
    code, _, err = run(capsys, "dataset", "--off-dir", tmp_path / "off", "--out", tmp_path / "o")
    assert code == EXIT_USAGE and "x.off:6" in err


# train

def test_train_outputs(workspace):
    run_dir = workspace / "run"
    for name in ("model.npz", "records.ndjson", "config.json", "summary.json", "checkpoints/epoch-0001.npz"):
        assert (run_dir / name).exists(), name
    rows = [json.loads(l) for l in (run_dir / "records.ndjson").read_text().splitlines()]
    assert len(rows) == 2  # 14 train clouds, batch 8
    assert [r["step"] for r in rows] == [1, 2]
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["train"]["n_classes"] == 3 and cfg["train"]["n_points"] == 32
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["split"] == "test" and summary["steps"] == 2


def test_train_prints_final_accuracy(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", workspace / "data" / "manifest.json")
    code, out, _ = run(capsys, "train", cfg, "--sam", "off", "--activation", "relu", "--out", tmp_path / "r")
    assert code == EXIT_OK
    assert "final test accuracy" in out
    used = json.loads((tmp_path / "r" / "config.json").read_text())["train"]
    assert used["activation"] == "relu" and used["sam"]["enabled"] is False


def test_train_resume_continues_step(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", workspace / "data" / "manifest.json")
    out_dir = tmp_path / "r"
    shutil.copytree(workspace / "run", out_dir)
    code, out, _ = run(capsys, "train", cfg, "--epochs", 2, "--resume", out_dir / "checkpoints" / "epoch-0001.npz",
                       "--out", out_dir)
    assert code == EXIT_OK and "resuming at step 2" in out
    rows = [json.loads(l) for l in (out_dir / "records.ndjson").read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2, 3, 4]


def test_train_invalid_config(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1, "dataset": {"manifest": "m.json"},
                               "train": {"epochs": "many", "wings": 2}}))
    code, _, err = run(capsys, "train", bad)
    assert code == EXIT_USAGE
    assert "epochs" in err and "wings" in err
    code, _, err = run(capsys, "train", tmp_path / "absent.json")
    assert code == EXIT_USAGE
    cfg = write_config(tmp_path / "c.json", workspace / "data" / "manifest.json", n_points=64)
    code, _, err = run(capsys, "train", cfg, "--out", tmp_path / "x")
    assert code == EXIT_USAGE and "64" in err


# sample

def test_sample_threshold_zero(workspace, tmp_path, capsys):
    code, _, _ = run(capsys, "sample", workspace / "run" / "model.npz", "--count", 5, "--threshold", 0,
                     "--steps", 2, "--out", tmp_path)
    assert code == EXIT_OK
    assert len(list(tmp_path.glob("*.xyz"))) == 5
    meta = json.loads((tmp_path / "samples.json").read_text())
    assert len(meta["samples"]) == 5 and not meta["exhausted"]


def test_sample_class_filter(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "sample", workspace / "run" / "model.npz", "--count", 2, "--threshold", 0.34,
                       "--class", "cube", "--steps", 2, "--max-attempts", 40, "--out", tmp_path)
    assert code == EXIT_OK
    meta = json.loads((tmp_path / "samples.json").read_text())
    for s in meta["samples"]:
        assert s["class"] == "cube" and s["confidence"] >= 0.34
    if meta["exhausted"]:
        assert "warning" in err


def test_sample_budget_exhausted_exit_zero(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "sample", workspace / "run" / "model.npz", "--count", 3, "--threshold", 1.0,
                       "--steps", 1, "--max-attempts", 6, "--out", tmp_path)
    assert code == EXIT_OK and "budget exhausted" in err
    assert json.loads((tmp_path / "samples.json").read_text())["exhausted"] is True


def test_sample_invalid_class(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "sample", workspace / "run" / "model.npz", "--class", "teapot", "--out", tmp_path)
    assert code == EXIT_USAGE
    assert "sphere" in err and "cube" in err and "cylinder" in err


# eval

def test_eval_self(workspace, tmp_path, capsys):
    d = tmp_path / "g"
    d.mkdir()
    for f in sorted((workspace / "data" / "clouds" / "sphere").glob("*.xyz"))[:3]:
        shutil.copy(f, d)
    code, out, _ = run(capsys, "eval", d, d)
    assert code == EXIT_OK
    doc = json.loads(out)
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert doc["raw"] == {"jsd": 0.0, "mmd_cd": 0.0, "mmd_emd": 0.0, "cov_cd": 1.0, "cov_emd": 1.0}
    assert json.loads((d / "metrics.json").read_text()) == doc


def test_eval_against_manifest(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", workspace / "data" / "manifest.json", workspace / "data" / "manifest.json",
                       "--out", tmp_path / "m.json")
    assert code == EXIT_OK and json.loads(out)["raw"]["mmd_cd"] == 0.0


def test_eval_cost_guard_and_mismatch(tmp_path, capsys):
    rng = np.random.default_rng(0)
    for d, n in (("a", 1024), ("b", 1024), ("c", 16)):
        (tmp_path / d).mkdir()
        write_xyz(rng.uniform(-1, 1, (n, 3)), tmp_path / d / "0.xyz")
    code, _, err = run(capsys, "eval", tmp_path / "a", tmp_path / "b", "--emd", "exact")
    assert code == EXIT_USAGE and "force" in err
    code, out, _ = run(capsys, "eval", tmp_path / "a", tmp_path / "b", "--emd", "exact", "--force",
                       "--out", tmp_path / "r.json")
    assert code == EXIT_OK and json.loads(out)["provenance"]["emd_mode"] == "exact"
    code, _, err = run(capsys, "eval", tmp_path / "a", tmp_path / "c")
    assert code == EXIT_USAGE and "point counts" in err


# classify

def test_classify_training_cloud(workspace, capsys):
    doc = read_manifest(workspace / "data" / "manifest.json")
    f = doc["splits"]["train"][0]["file"]
    code, out, _ = run(capsys, "classify", workspace / "run" / "model.npz", workspace / "data" / f)
    assert code == EXIT_OK
    name, conf = out.split()
    assert name in doc["class_names"] and 0.0 < float(conf) <= 1.0
    code, out, _ = run(capsys, "classify", workspace / "run" / "model.npz", workspace / "data" / f, "--json")
    assert json.loads(out)["class"] == name


def test_classify_untrained_near_uniform(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", workspace / "data" / "manifest.json", epochs=1)
    # one step at a tiny learning rate keeps the model at its initialization
    doc = json.loads(cfg.read_text())
    doc["train"]["adam"] = {"lr": 1e-12}
    cfg.write_text(json.dumps(doc))
    assert main(["train", str(cfg), "--out", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    write_xyz(np.random.default_rng(1).uniform(-1, 1, (32, 3)), tmp_path / "u.xyz")
    code, out, _ = run(capsys, "classify", tmp_path / "r" / "model.npz", tmp_path / "u.xyz")
    assert code == EXIT_OK and abs(float(out.split()[1]) - 1 / 3) < 0.1


def test_classify_errors(workspace, tmp_path, capsys):
    write_xyz(np.zeros((10, 3)), tmp_path / "small.xyz")
    code, _, err = run(capsys, "classify", workspace / "run" / "model.npz", tmp_path / "small.xyz")
    assert code == EXIT_USAGE and "32" in err
    (tmp_path / "trunc.xyz").write_text("0 0 0\n1 1\n")
    code, _, err = run(capsys, "classify", workspace / "run" / "model.npz", tmp_path / "trunc.xyz")
    assert code == EXIT_USAGE and ":2:" in err
    code, _, _ = run(capsys, "classify", tmp_path / "none.npz", tmp_path / "small.xyz")
    assert code == EXIT_USAGE


# plot

def test_plot_circles_and_determinism(tmp_path, capsys):
    write_xyz(np.random.default_rng(0).uniform(-1, 1, (25, 3)), tmp_path / "c.xyz")
    assert run(capsys, "plot", tmp_path / "c.xyz", "--out", tmp_path / "a.svg")[0] == EXIT_OK
    assert run(capsys, "plot", tmp_path / "c.xyz", "--out", tmp_path / "b.svg")[0] == EXIT_OK
    a = (tmp_path / "a.svg").read_bytes()
    assert a.count(b"<circle") == 75
    assert a == (tmp_path / "b.svg").read_bytes()
    assert a.startswith(b"<svg") or a.startswith(b"<?xml")


def test_plot_errors(tmp_path, capsys):
    assert run(capsys, "plot", "--out", tmp_path / "a.svg")[0] == EXIT_USAGE
    write_xyz(np.zeros((2, 3)), tmp_path / "c.xyz")
    assert run(capsys, "plot", tmp_path / "c.xyz", "--out", tmp_path / "no" / "dir" / "a.svg")[0] == EXIT_USAGE
    assert run(capsys, "plot", tmp_path / "missing.xyz", "--out", tmp_path / "a.svg")[0] == EXIT_USAGE


# wiring

def test_env_output_dir(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("POINTJEM_OUTPUT_DIR", str(tmp_path / "env"))
    code, _, _ = run(capsys, "dataset", "--synthetic", 2, "--per-class", 2, "--points", 8)
    assert code == EXIT_OK and (tmp_path / "env" / "dataset" / "manifest.json").exists()


def test_threads_flag_and_console_script(tmp_path):
    exe = shutil.which("pointjem")
    cmd = [exe] if exe else [sys.executable, "-m", "pointjem.cli"]
    res = subprocess.run(cmd + ["--threads", "1", "dataset", "--synthetic", "2", "--per-class", "2",
                                "--points", "8", "--out", str(tmp_path)], capture_output=True, text=True,
                         env=dict(os.environ))
    assert res.returncode == 0, res.stderr
    res = subprocess.run(cmd + ["train"], capture_output=True, text=True)
    assert res.returncode == 2
