"""The full phantom experiment: classification on both planes with and
without ROI cropping, supervised regression of selected targets, and the
semi-supervised correlation, all written below one output directory.

Output layout::

    out/dataset/                      phantom cohort (manifest.json, scores.csv, slices/)
    out/classify_<plane>/             report files
    out/classify_<plane>_roi/         same, on Chan-Vese ROI crops (sagittal by default)
    out/regress_<target>_<plane>/     report files
    out/roi_comparison.csv            accuracy with and without cropping
    out/semisupervised.csv            |Pearson| of exam PC1 scores vs mean healing score
    out/summary.json                  headline numbers

Nothing time- or host-dependent is written, so identical settings give
byte-identical directories. Wall-clock timings are returned, not stored.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

from .chanvese import ChanVeseParams
from .evaluation import CVReport, CVSettings, run_cv
from .fileio import dumps_json, load_dataset
from .models import PLANES, ModelConfig
from .phantom import PhantomParams, generate_dataset
from .report import _csv, emit_report
from .scoring import TrainHyper
from .seeding import derive_seed


@dataclass(frozen=True)
class ExperimentConfig:
    n_patients: int = 8
    n_healthy: int = 8
    slices_per_exam: int = 10
    planes: tuple[str, ...] = PLANES
    k: int = 5
    classify_hyper: TrainHyper = TrainHyper(epochs=5, batch_size=16, learning_rate=1e-3)
    regress_hyper: TrainHyper = TrainHyper(epochs=8, batch_size=16, learning_rate=2e-3)
    regress_targets: tuple[str, ...] = ("TT", "TE")
    regress_planes: tuple[str, ...] = ("sagittal",)
    roi_planes: tuple[str, ...] = ("sagittal",)
    chanvese: ChanVeseParams = ChanVeseParams(max_iter=200)
    phantom: PhantomParams = field(default_factory=PhantomParams)


@dataclass
class ExperimentResult:
    root: Path
    classify: dict[str, CVReport] = field(default_factory=dict)
    classify_roi: dict[str, CVReport] = field(default_factory=dict)
    regress: dict[tuple[str, str], CVReport] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


def run_experiment(out: str | Path, seed: int = 0, config: ExperimentConfig | None = None, workers: int = 1) -> ExperimentResult:
    cfg = config or ExperimentConfig()
    out = Path(out)
    result = ExperimentResult(out)
    clock = time.perf_counter()
    generate_dataset(
        cfg.n_patients, cfg.n_healthy, cfg.slices_per_exam, cfg.planes, cfg.phantom, derive_seed(seed, "phantom"), out / "dataset"
    )
    exams = load_dataset(out / "dataset").exams
    result.timings["dataset"] = time.perf_counter() - clock

    def cv(name: str, **kw) -> CVReport:
        start = time.perf_counter()
        report = run_cv(exams, CVSettings(k=cfg.k, seed=derive_seed(seed, name), chanvese=cfg.chanvese, **kw), workers)
        emit_report(report, out / name)
        result.timings[name] = time.perf_counter() - start
        return report

    for plane in cfg.planes:
        conf = ModelConfig(plane=plane)
        result.classify[plane] = cv(f"classify_{plane}", task="classify", plane=plane, config=conf, hyper=cfg.classify_hyper)
        if plane in cfg.roi_planes:
            result.classify_roi[plane] = cv(
                f"classify_{plane}_roi",
                task="classify",
                plane=plane,
                config=conf,
                hyper=cfg.classify_hyper,
                roi_crop=True,
                semisupervised=False,
            )
    for plane in cfg.regress_planes:
        for target in cfg.regress_targets:
            conf = ModelConfig(head="regress", target=target, plane=plane)
            result.regress[(target, plane)] = cv(
                f"regress_{target}_{plane}", task="regress", plane=plane, config=conf, hyper=cfg.regress_hyper
            )
    _write_tables(result)
    return result


def roi_table(result: ExperimentResult) -> list[list]:
    rows: list[list] = [["plane", "accuracy_full", "sd_full", "accuracy_roi", "sd_roi", "difference"]]
    for plane, roi in result.classify_roi.items():
        full_m, full_s = result.classify[plane].aggregate["accuracy"]
        roi_m, roi_s = roi.aggregate["accuracy"]
        rows.append([plane, full_m, full_s, roi_m, roi_s, roi_m - full_m])
    return rows


def _write_tables(result: ExperimentResult) -> None:
    out = result.root
    (out / "roi_comparison.csv").write_text(_csv(roi_table(result)))
    semi = [["plane", "pc1_abs_corr_mean", "pc1_abs_corr_sd"]]
    for plane, report in result.classify.items():
        semi.append([plane, *report.aggregate.get("pc1_abs_corr", [None, None])])
    (out / "semisupervised.csv").write_text(_csv(semi))
    summary = {
        "classify": {p: {"accuracy": r.aggregate["accuracy"]} for p, r in result.classify.items()},
        "classify_roi": {p: {"accuracy": r.aggregate["accuracy"]} for p, r in result.classify_roi.items()},
        "regress": {
            f"{t}_{p}": {
                "mae": r.aggregate["mae"],
                "max_ae": r.summary["overall_max_ae"],
                "fisher_mean_correlation": r.summary["fisher_mean_correlation"],
            }
            for (t, p), r in result.regress.items()
        },
        "semisupervised_pc1_abs_corr": {p: r.aggregate.get("pc1_abs_corr") for p, r in result.classify.items()},
    }
    (out / "summary.json").write_text(dumps_json(summary))
