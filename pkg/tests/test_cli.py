import csv
import filecmp
import json
import subprocess
import sys

import pytest

from tendonheal.cli import main
from tendonheal.fileio import load_checkpoint
from tendonheal.models import TARGETS

FAST = ["--preset", "small", "--epochs", "1"]


def tree(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def assert_same_tree(a, b):
    files = tree(a)
    assert files == tree(b)
    _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    assert not mismatch and not errors, mismatch


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "d"
    assert main(["phantom", "generate", "--patients", "4", "--healthy", "2", "--slices", "3", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_smoke_pipeline(tmp_path):
    data = tmp_path / "d"
    assert main(["phantom", "generate", "--patients", "4", "--healthy", "2", "--seed", "7", "--out", str(data)]) == 0
    assert (data / "manifest.json").exists()
    out = tmp_path / "cv"
    assert main(["evaluate", "cv", "--task", "classify", "--data", str(data), "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists()


def test_train_regress_without_target(data, tmp_path, capsys):
    assert main(["train", "regress", "--data", str(data), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    for target in TARGETS:
        assert target in err
    assert not (tmp_path / "model.ckpt").exists()


def test_unknown_flag_prints_usage(capsys):
    assert main(["phantom", "generate", "--colour", "blue"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--colour" in err


def test_unknown_command_and_help(capsys):
    assert main(["fly"]) == 1
    assert main(["--help"]) == 0
    assert "phantom" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tendonheal", "train", "regress", "--data", "x"], capture_output=True, text=True)
    assert proc.returncode == 1 and "TisE" in proc.stderr


def test_bad_config_and_dataset(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"model": {"preset": "small"}, "weather": {}}')
    assert main(["train", "classify", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert main(["train", "classify", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert main(["evaluate", "cv", "--task", "classify", "--target", "TT", "--data", str(data)]) == 1


def test_unwritable_output_is_runtime_failure(data, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["phantom", "generate", "--patients", "1", "--healthy", "1", "--out", str(blocker / "d")]) == 2


def test_train_score_and_pca(data, tmp_path):
    model_dir = tmp_path / "m"
    assert main(["train", "regress", "--target", "TE", "--data", str(data), *FAST, "--out", str(model_dir)]) == 0
    model = load_checkpoint(model_dir / "model.ckpt")
    assert model.config.target == "TE" and model.config.head == "regress"
    run = json.loads((model_dir / "train_run.json").read_text())
    assert len(run["loss_history"]) == 1

    scores = tmp_path / "s"
    assert main(["score", "exam", "--model", str(model_dir / "model.ckpt"), "--data", str(data), "--out", str(scores)]) == 0
    with open(scores / "exam_scores.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 10 + 2
    assert all(1.0 <= float(r["predicted"]) <= 7.0 for r in rows)

    pca = tmp_path / "p"
    assert main(["pca", "fit", "--model", str(model_dir / "model.ckpt"), "--data", str(data), "--out", str(pca)]) == 0
    assert 0.0 <= json.loads((pca / "correlation.json").read_text())["abs_pearson"] <= 1.0


def test_segment_command(data, tmp_path):
    image = sorted(data.rglob("*.pgm"))[0]
    assert main(["segment", "--image", str(image), "--max-iter", "50", "--out", str(tmp_path)]) == 0
    info = json.loads((tmp_path / "segmentation.json").read_text())
    assert info["iterations"] <= 50 and (tmp_path / "mask.pgm").exists()


def run_sequence(root, data_args):
    data = root / "d"
    steps = [
        ["phantom", "generate", *data_args, "--out", str(data)],
        ["train", "classify", "--data", str(data), *FAST, "--out", str(root / "clf")],
        ["train", "regress", "--target", "TT", "--data", str(data), *FAST, "--out", str(root / "reg")],
        ["score", "exam", "--model", str(root / "reg" / "model.ckpt"), "--data", str(data), "--out", str(root / "score")],
        ["pca", "fit", "--model", str(root / "clf" / "model.ckpt"), "--data", str(data), "--out", str(root / "pca")],
        ["evaluate", "cv", "--task", "regress", "--target", "TT", "--data", str(data), "--folds", "3", *FAST, "--out", str(root / "cv")],
        ["report", "--input", str(root / "cv"), "--out", str(root / "rep")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv


def test_command_sequence_is_deterministic(tmp_path):
    data_args = ["--patients", "3", "--healthy", "2", "--slices", "2", "--seed", "11"]
    run_sequence(tmp_path / "a", data_args)
    run_sequence(tmp_path / "b", data_args)
    assert_same_tree(tmp_path / "a", tmp_path / "b")
    assert_same_tree(tmp_path / "a" / "cv", tmp_path / "a" / "rep")
