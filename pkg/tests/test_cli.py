"""End-to-end CLI flows and exit codes (0 ok, 2 usage, 3 diverged, 4 data)."""

import os

import numpy as np
import pytest

from segdistill.cli import main

TINY_MODEL = ["--set", "model.num_blocks=2", "--set", "model.feature_maps=3",
              "--set", "model.kernel=3"]
TINY_TRAIN = ["--set", "train.epochs=1", "--set", "train.steps_per_epoch=2",
              "--set", "train.batch_dense=2", "--set", "train.batch_sparse=1"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    rc = main(["gen-data", "--out", data, "--seed", "3",
               "--num-dense", "4", "--num-sparse", "3", "--num-unlabeled", "2",
               "--width", "32", "--height", "32"])
    assert rc == 0
    return root, data


@pytest.fixture(scope="module")
def trained(workdir):
    root, data = workdir
    out = str(root / "run_dense")
    rc = main(["train", "--data", data, "--out", out,
               "--strategy", "e2e_dense", "--seed", "1"]
              + TINY_MODEL + TINY_TRAIN)
    assert rc == 0
    return out


def test_gen_data_writes_dataset(workdir):
    _, data = workdir
    assert os.path.exists(os.path.join(data, "manifest.tsv"))
    assert os.path.exists(os.path.join(data, "stats.csv"))
    from segdistill.dataset import read_dataset
    assert len(read_dataset(data)) == 9


def test_gen_data_usage_errors(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "x"),
                 "--width", "30", "--height", "32"]) == 2
    assert main(["gen-data", "--out", str(tmp_path / "x"),
                 "--num-dense", "-1"]) == 2
    assert main(["gen-data"]) == 2                     # missing --out


def test_unknown_command_and_bad_override(workdir, tmp_path):
    _, data = workdir
    assert main(["tune"]) == 2
    assert main(["train", "--data", data, "--out", str(tmp_path / "o"),
                 "--set", "train.bogus=1"] + TINY_MODEL) == 2


def test_train_outputs(trained):
    for name in ("model.sdnc", "train_log.csv", "status.txt", "config.ini",
                 "summary.txt"):
        assert os.path.exists(os.path.join(trained, name)), name
    with open(os.path.join(trained, "status.txt")) as fh:
        assert fh.read().strip() == "completed"


def test_train_missing_data_dir(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")] + TINY_MODEL) == 4


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_train_diverged_exit(workdir):
    root, data = workdir
    out = str(root / "run_blowup")
    rc = main(["train", "--data", data, "--out", out,
               "--strategy", "e2e_dense",
               "--set", "train.optimizer=sgd", "--set", "train.lr=1e12",
               "--set", "train.epochs=2", "--set", "train.steps_per_epoch=10"]
              + TINY_MODEL)
    assert rc == 3
    with open(os.path.join(out, "status.txt")) as fh:
        assert fh.read().strip() == "diverged"


def test_train_ensemble_requires_bases(workdir, tmp_path):
    _, data = workdir
    assert main(["train", "--data", data, "--out", str(tmp_path / "o"),
                 "--strategy", "ensemble_fusion"] + TINY_MODEL) == 2


def test_eval_writes_report(workdir, trained, tmp_path):
    _, data = workdir
    report = str(tmp_path / "eval.csv")
    rc = main(["eval", "--model", os.path.join(trained, "model.sdnc"),
               "--data", data, "--out", report, "--name", "dense_run"])
    assert rc == 0
    with open(report) as fh:
        lines = fh.read().splitlines()
    assert lines[0].startswith("name,")
    assert lines[1].startswith("dense_run,")


def test_eval_data_errors(trained, tmp_path):
    model = os.path.join(trained, "model.sdnc")
    assert main(["eval", "--model", model, "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "r.csv")]) == 4
    assert main(["eval", "--model", str(tmp_path / "missing.sdnc"),
                 "--data", str(tmp_path), "--out",
                 str(tmp_path / "r.csv")]) == 4


def test_distill_flow(workdir, trained, tmp_path):
    _, data = workdir
    out = str(tmp_path / "distilled")
    args = ["distill", "--data", data, "--out", out,
            "--teacher", os.path.join(trained, "model.sdnc"),
            "--method", "tk_smp",
            "--set", "distill.epochs=1", "--set", "distill.steps_per_epoch=2",
            "--set", "distill.batch_labeled=2",
            "--set", "distill.batch_unlabeled=1",
            "--report-data", data] + TINY_MODEL
    assert main(args) == 0
    for name in ("student.sdnc", "train_log.csv", "status.txt",
                 "transfer_report.csv"):
        assert os.path.exists(os.path.join(out, name)), name
    cache_key = os.path.join(out, "cache", "key.txt")
    with open(cache_key) as fh:
        first_key = fh.read()
    # second run with the same teacher reuses the cache rather than
    # recomputing it
    before = os.path.getmtime(cache_key)
    assert main(args) == 0
    assert os.path.getmtime(cache_key) == before
    with open(cache_key) as fh:
        assert fh.read() == first_key


def test_distill_rejects_three_teachers(workdir, trained, tmp_path):
    _, data = workdir
    model = os.path.join(trained, "model.sdnc")
    assert main(["distill", "--data", data, "--out", str(tmp_path / "o"),
                 "--teacher", model, "--teacher", model, "--teacher", model]
                + TINY_MODEL) == 2


def test_report_merges_runs(workdir, trained, tmp_path):
    root, _ = workdir
    out = str(tmp_path / "table.csv")
    diverged = str(root / "run_blowup")
    rc = main(["report", trained, diverged, "--out", out,
               "--baseline", os.path.basename(trained)])
    assert rc == 0
    with open(out) as fh:
        text = fh.read()
    assert "run,status,per_class" in text
    assert "training diverged" in text


def test_report_errors(trained, tmp_path):
    assert main(["report", str(tmp_path / "ghost"),
                 "--out", str(tmp_path / "t.csv")]) == 4
    assert main(["report", trained, "--out", str(tmp_path / "t.csv"),
                 "--baseline", "nonexistent"]) == 4
