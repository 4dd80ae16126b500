import filecmp
import json
import os

import numpy as np
import pytest

from mire import cli
from mire.report import pca_2d, write_pgm

TINY = ["--K", "2", "--N", "3", "--samples", "8", "--seed", "3"]
FAST = ["--epochs", "2", "--phase0-epochs", "1", "--train-seeds", "0"]


def run(argv):
    return cli.main(argv)


def dirs_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(
        a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(dirs_identical(os.path.join(a, d), os.path.join(b, d))
               for d in cmp.common_dirs)


# -- generate -----------------------------------------------------------------

def test_generate_deterministic_dirs(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run(["generate", *TINY, "--out", a]) == 0
    assert run(["generate", *TINY, "--out", b]) == 0
    assert dirs_identical(a, b)


def test_generate_refuses_overwrite(tmp_path, capsys):
    out = str(tmp_path / "d")
    assert run(["generate", *TINY, "--out", out]) == 0
    assert run(["generate", *TINY, "--out", out]) == 2
    assert "--force" in capsys.readouterr().err
    assert run(["generate", *TINY, "--out", out, "--force"]) == 0


def test_generate_bad_heldout(tmp_path):
    out = str(tmp_path / "d")
    assert run(["generate", *TINY, "--heldout", "9", "--out", out]) == 2


# -- config handling ----------------------------------------------------------

def test_config_file_unknown_key(tmp_path):
    cfg_path = str(tmp_path / "cfg.json")
    with open(cfg_path, "w") as fh:
        json.dump({"learning_rate": 0.1}, fh)
    code = run(["train", *TINY, *FAST, "--target", "0",
                "--config", cfg_path])
    assert code == 2


def test_config_file_unknown_flag(tmp_path):
    cfg_path = str(tmp_path / "cfg.json")
    with open(cfg_path, "w") as fh:
        json.dump({"flags": {"no_everything": True}}, fh)
    assert run(["train", *TINY, *FAST, "--target", "0",
                "--config", cfg_path]) == 2


def test_config_file_applies(tmp_path, capsys):
    cfg_path = str(tmp_path / "cfg.json")
    with open(cfg_path, "w") as fh:
        json.dump({"epochs": 2, "phase0_epochs": 1, "seeds": [0],
                   "flags": {"no_cdm": True, "no_astr": True}}, fh)
    assert run(["train", *TINY, "--target", "0", "--config", cfg_path]) == 0
    assert "MiRe" in capsys.readouterr().out


# -- training and evaluation --------------------------------------------------

def test_train_and_report(tmp_path, capsys):
    run_dir = str(tmp_path / "run")
    assert run(["train", *TINY, *FAST, "--target", "2",
                "--out", run_dir]) == 0
    out = capsys.readouterr().out
    assert "DeepAll" in out and "MiRe" in out
    assert os.path.exists(os.path.join(run_dir, "fold.json"))

    report_dir = str(tmp_path / "report")
    assert run(["report", "--run", run_dir, "--out", report_dir]) == 0
    svgs = [f for f in os.listdir(report_dir) if f.endswith(".svg")]
    assert len(svgs) >= 3
    assert os.path.exists(os.path.join(report_dir, "summary.md"))
    with open(os.path.join(report_dir, "summary.md")) as fh:
        assert "test accuracy" in fh.read()


def test_train_bad_target():
    assert run(["train", *TINY, *FAST, "--target", "7"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code():
    assert run(["train", *TINY, *FAST, "--target", "0", "--lr", "1e9"]) == 4


def test_evaluate_deterministic(tmp_path, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (a, b):
        assert run(["evaluate", *TINY, *FAST, "--out", out]) == 0
    with open(os.path.join(a, "metrics.csv"), "rb") as fh:
        ma = fh.read()
    with open(os.path.join(b, "metrics.csv"), "rb") as fh:
        mb = fh.read()
    assert ma == mb
    assert "mean±std" in ma.decode()


# -- mix and gradcam ----------------------------------------------------------

@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("data") / "tiny")
    assert cli.main(["generate", *TINY, "--heldout", "2", "--out", path]) == 0
    return path


def test_mix_subcommand(dataset_dir, tmp_path, capsys):
    out = str(tmp_path / "mixed")
    pgm = str(tmp_path / "pgm")
    assert run(["mix", *FAST, "--dataset", dataset_dir,
                "--sources", "0", "1", "--out", out,
                "--export-pgm", pgm]) == 0
    text = capsys.readouterr().out
    assert "16 mixed" in text            # (2-1) * 2 domains * 8 samples
    assert len([f for f in os.listdir(pgm) if f.endswith(".pgm")]) > 0
    from mire import synthdata
    mixed = synthdata.load(out)
    assert sum(s.provenance is not None for s in mixed.all_samples()) == 16


def test_gradcam_subcommand(dataset_dir, tmp_path):
    out = str(tmp_path / "maps")
    assert run(["gradcam", *FAST, "--dataset", dataset_dir,
                "--count", "2", "--out", out]) == 0
    files = os.listdir(out)
    for tag in ("class", "domain", "mask"):
        assert sum(f.endswith(f"{tag}.pgm") for f in files) == 2
        assert sum(f.endswith(f"{tag}.mirt") for f in files) == 2


# -- help annotations ---------------------------------------------------------

def test_help_lists_provenance(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = capsys.readouterr().out
    assert "[paper" in text and "[chosen]" in text


# -- report helpers -----------------------------------------------------------

def test_pca_deterministic_and_centered():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(50, 8))
    a, b = pca_2d(feats), pca_2d(feats)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (50, 2)
    assert np.abs(a.mean(axis=0)).max() < 1e-10


def test_write_pgm_format(tmp_path):
    path = str(tmp_path / "img.pgm")
    write_pgm(path, np.array([[0.0, 1.0], [0.5, 0.25]]))
    with open(path, "rb") as fh:
        raw = fh.read()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert raw[-4:] == bytes([0, 255, 128, 64])
