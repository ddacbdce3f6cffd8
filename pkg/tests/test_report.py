import re
import statistics

import pytest

from tendonheal.evaluation import CVError, CVReport, CVSettings, run_cv
from tendonheal.models import preset
from tendonheal.report import TICK_LABELS, emit_report, healing_curve_svg, load_report, read_metrics_csv
from tendonheal.scoring import TrainHyper

FAST = TrainHyper(epochs=1, batch_size=8, learning_rate=2e-3)


@pytest.fixture(scope="module")
def classify_report(small_exams):
    return run_cv(small_exams, CVSettings("classify", "sagittal", preset("small"), FAST, k=3, seed=1))


@pytest.fixture(scope="module")
def regress_report(small_exams):
    cfg = preset("small", head="regress", target="TT")
    return run_cv(small_exams, CVSettings("regress", "sagittal", cfg, FAST, k=3, seed=1))


@pytest.mark.parametrize("which", ["classify_report", "regress_report"])
def test_metrics_aggregate_row_matches_fold_rows(which, request, tmp_path):
    report = request.getfixturevalue(which)
    emit_report(report, tmp_path)
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    folds = [rows[str(f)] for f in range(report.k)]
    for name in rows["mean"]:
        values = [f[name] for f in folds if f[name] is not None]
        assert rows["mean"][name] == pytest.approx(statistics.fmean(values), abs=1e-12)
        assert rows["sd"][name] == pytest.approx(statistics.stdev(values), abs=1e-12)
    text = (tmp_path / "metrics.csv").read_text()
    assert re.search(r"^mean±sd,\d\.\d{3}±\d\.\d{3}", text, re.M)


def test_classification_files(classify_report, tmp_path):
    names = {p.name for p in emit_report(classify_report, tmp_path)}
    assert {"report.json", "metrics.csv", "predictions.csv", "roc.csv", "pr.csv", "roc.svg", "pr.svg"} <= names
    roc = (tmp_path / "roc.csv").read_text().splitlines()
    assert roc[0] == "threshold,fpr,tpr" and roc[1] == "inf,0.0,0.0" and roc[-1].endswith(",1.0,1.0")


def test_healing_curves(regress_report, tmp_path):
    emit_report(regress_report, tmp_path)
    curves = sorted(tmp_path.glob("healing_curve_*.svg"))
    patients = {p["subject_id"] for p in regress_report.predictions if p["timepoint"] >= 0}
    assert {c.stem.removeprefix("healing_curve_") for c in curves} == patients
    for path in curves:
        svg = path.read_text()
        assert svg.count("<polyline") == 2
        assert svg.count('<g class="xtick">') == 10
        for label in TICK_LABELS:
            assert f">{label}<" in svg


def test_healing_curve_svg_structure():
    rows = [{"timepoint": t, "predicted": 7 - 0.5 * t, "ground_truth": 7 - 0.6 * t} for t in range(10)]
    svg = healing_curve_svg("P000", "TE", rows)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<polyline") == 2 and svg.count('<g class="xtick">') == 10


def test_emit_report_rejects_empty(tmp_path):
    empty = CVReport("classify", "sagittal", None, 5, 0, folds=[], predictions=[])
    with pytest.raises(CVError):
        emit_report(empty, tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_emit_report_rejects_inconsistent(classify_report, tmp_path):
    data = classify_report.to_dict()
    data["aggregate"] = {**data["aggregate"], "accuracy": [0.123, 0.0]}
    with pytest.raises(CVError):
        emit_report(CVReport(**data), tmp_path / "out")


def test_report_roundtrip_and_byte_identical_rewrite(regress_report, tmp_path):
    emit_report(regress_report, tmp_path / "a")
    loaded = load_report(tmp_path / "a")
    assert loaded.to_dict() == regress_report.to_dict()
    emit_report(loaded, tmp_path / "b")
    for path in sorted((tmp_path / "a").iterdir()):
        assert (tmp_path / "b" / path.name).read_bytes() == path.read_bytes()


def test_load_report_detects_edited_metrics(classify_report, tmp_path):
    emit_report(classify_report, tmp_path)
    text = (tmp_path / "metrics.csv").read_text().splitlines()
    i = next(i for i, line in enumerate(text) if line.startswith("mean,"))
    parts = text[i].split(",")
    parts[1] = "0.5"
    text[i] = ",".join(parts)
    (tmp_path / "metrics.csv").write_text("\n".join(text) + "\n")
    with pytest.raises(CVError):
        load_report(tmp_path)


def test_unwritable_output(classify_report, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="cannot write report"):
        emit_report(classify_report, blocker / "sub")
