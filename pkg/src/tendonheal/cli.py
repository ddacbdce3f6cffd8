"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (bad flags, configs, datasets,
checkpoints), 2 runtime failure (I/O and anything unexpected).

``--config`` takes a JSON file whose optional sections override defaults;
explicit flags override the file::

    {"model": {"preset": "small", "feature_dim": 32},
     "train": {"epochs": 5, "batch_size": 16, "optimizer": "adam", "learning_rate": 0.001},
     "policy": {"mirror_healthy": true, "subsample_injured_per_epoch": true},
     "cv": {"k": 5, "trunc_fraction": 0.1, "correlation": "per-patient"},
     "phantom": {"speckle_sigma": 0.25},
     "chanvese": {"mu": 0.1, "max_iter": 200}}
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .chanvese import INITS, ChanVeseParams, crop_roi, segment, tissue_roi
from .evaluation import CVSettings, pearson, run_cv
from .experiments import ExperimentConfig, ExperimentResult, roi_table, run_experiment
from .fileio import dumps_json, load_checkpoint, load_dataset, read_pgm, save_checkpoint, write_pgm
from .models import PLANES, TARGETS, ModelConfig, preset
from .phantom import PhantomParams, generate_dataset
from .report import _csv, emit_report, load_report
from .scoring import (
    DEFAULT_TRUNC,
    BalancingPolicy,
    TrainHyper,
    exam_pc_scores,
    fit_feature_pca,
    predict_exam,
    train_classifier,
    train_regressor,
)

CLASSIFY_DEFAULTS = {"epochs": 5, "learning_rate": 1e-3}
REGRESS_DEFAULTS = {"epochs": 8, "learning_rate": 2e-3}
CONFIG_SECTIONS = {"model", "train", "policy", "cv", "phantom", "chanvese"}


class UsageError(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out: str) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed for every random choice (default 0)")
    p.add_argument("--config", type=Path, help="JSON file with default overrides (see module help)")
    p.add_argument("--out", type=Path, default=Path(out), help=f"output directory (default {out})")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes (default 1)")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--plane", choices=PLANES, default="sagittal", help="scan plane (default sagittal)")
    p.add_argument("--preset", choices=("small", "medium", "large"), help="model size preset (default medium)")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", type=int, help="minibatch size (default 16)")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--optimizer", choices=("adam", "sgd", "momentum"), help="optimizer (default adam)")


def build_parser() -> Parser:
    parser = Parser(prog="tendonheal", description="Tendon healing assessment on synthetic ultrasound phantoms.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    phantom = sub.add_parser("phantom", help="synthetic phantom datasets")
    psub = phantom.add_subparsers(dest="action", required=True, parser_class=Parser)
    gen = psub.add_parser("generate", help="write a phantom cohort to --out")
    _common(gen, "phantom")
    gen.add_argument("--patients", type=int, default=8, help="injured patients, ten exams each (default 8)")
    gen.add_argument("--healthy", type=int, default=8, help="healthy volunteers, one exam each (default 8)")
    gen.add_argument("--slices", type=int, default=10, help="slices per exam (default 10)")
    gen.add_argument("--planes", default="sagittal,axial", help="comma-separated planes (default sagittal,axial)")

    seg = sub.add_parser("segment", help="Chan-Vese segmentation and ROI crop of one PGM slice")
    _common(seg, "segment")
    seg.add_argument("--image", type=Path, required=True, help="input PGM slice")
    seg.add_argument("--init", choices=INITS, default="intensity", help="level-set initialization (default intensity)")
    seg.add_argument("--max-iter", type=int, help="iteration cap (default 200)")
    seg.add_argument("--margin", type=int, default=4, help="pixels added around the ROI box (default 4)")

    train = sub.add_parser("train", help="train a model on a dataset")
    tsub = train.add_subparsers(dest="action", required=True, parser_class=Parser)
    tc = tsub.add_parser("classify", help="injured-vs-healthy slice classifier")
    _common(tc, "model")
    _training_flags(tc)
    tc.add_argument("--no-mirror", action="store_true", help="do not add mirrored healthy slices")
    tc.add_argument("--no-subsample", action="store_true", help="do not balance classes per epoch")
    tr = tsub.add_parser("regress", help="scalar regressor for one healing parameter")
    _common(tr, "model")
    _training_flags(tr)
    tr.add_argument("--target", help=f"healing parameter, one of {', '.join(TARGETS)}")

    score = sub.add_parser("score", help="apply a trained regressor")
    ssub = score.add_subparsers(dest="action", required=True, parser_class=Parser)
    se = ssub.add_parser("exam", help="exam-level scores (truncated mean of slice outputs)")
    _common(se, "scores")
    se.add_argument("--model", type=Path, required=True, help="regression checkpoint")
    se.add_argument("--data", type=Path, required=True, help="dataset directory")
    se.add_argument("--exam", help="score only this exam id")
    se.add_argument("--trunc", type=float, default=None, help=f"fraction trimmed from each tail (default {DEFAULT_TRUNC})")

    pca = sub.add_parser("pca", help="semi-supervised PCA scoring")
    pcsub = pca.add_subparsers(dest="action", required=True, parser_class=Parser)
    pf = pcsub.add_parser("fit", help="fit PCA on penultimate features and score every exam")
    _common(pf, "pca")
    pf.add_argument("--model", type=Path, required=True, help="checkpoint supplying the features")
    pf.add_argument("--data", type=Path, required=True, help="dataset directory")
    pf.add_argument("--k", type=int, default=1, help="number of components (default 1)")
    pf.add_argument("--trunc", type=float, default=None, help=f"fraction trimmed from each tail (default {DEFAULT_TRUNC})")

    ev = sub.add_parser("evaluate", help="cross-validation experiments")
    esub = ev.add_subparsers(dest="action", required=True, parser_class=Parser)
    cv = esub.add_parser("cv", help="subject-level k-fold cross-validation")
    _common(cv, "report")
    cv.add_argument("--task", choices=("classify", "regress"), required=True, help="classify or regress")
    cv.add_argument("--target", help=f"regression target, one of {', '.join(TARGETS)}")
    cv.add_argument("--data", type=Path, required=True, help="dataset directory")
    cv.add_argument("--plane", choices=PLANES, default="sagittal", help="scan plane (default sagittal)")
    cv.add_argument("--folds", type=int, help="number of folds (default 5)")
    cv.add_argument("--preset", choices=("small", "medium", "large"), help="model size preset (default medium)")
    cv.add_argument("--epochs", type=int, help="training epochs per fold")
    cv.add_argument("--batch-size", type=int, help="minibatch size (default 16)")
    cv.add_argument("--lr", type=float, help="learning rate")
    cv.add_argument("--optimizer", choices=("adam", "sgd", "momentum"), help="optimizer (default adam)")
    cv.add_argument("--roi-crop", action="store_true", help="train and test on Chan-Vese ROI crops")
    cv.add_argument("--roi-compare", action="store_true", help="classify with and without ROI crops, write a comparison table")
    cv.add_argument("--correlation", choices=("per-patient", "per-fold"), help="correlation granularity (default per-patient)")
    ex = esub.add_parser("experiment", help="the full phantom experiment (all planes, tasks and tables)")
    _common(ex, "experiment")

    rep = sub.add_parser("report", help="re-emit report files from a report directory")
    _common(rep, "report")
    rep.add_argument("--input", type=Path, required=True, help="directory containing report.json")
    return parser


# --------------------------------------------------------------------------
# config helpers


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict) or set(data) - CONFIG_SECTIONS:
        raise UsageError(f"{path}: config must be an object with sections among {sorted(CONFIG_SECTIONS)}")
    return data


def _dataclass_from(cls, section: dict, **overrides):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values = dict(section)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def model_config(cfg: dict, args, head: str, target: str | None) -> ModelConfig:
    section = dict(cfg.get("model", {}))
    name = args.preset or section.pop("preset", "medium")
    section.pop("preset", None)
    if "conv_blocks" in section:
        section["conv_blocks"] = tuple(tuple(b) for b in section["conv_blocks"])
    return preset(name, **{**section, "head": head, "plane": args.plane, "target": target})


def train_hyper(cfg: dict, args, defaults: dict, seed: int) -> TrainHyper:
    section = {**defaults, **cfg.get("train", {})}
    return _dataclass_from(
        TrainHyper,
        section,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        seed=seed,
    )


def require_target(target: str | None) -> str:
    if target not in TARGETS:
        shown = "missing" if target is None else repr(target)
        raise UsageError(f"--target is {shown}; choose one of {', '.join(TARGETS)}")
    return target


def _exams(data: Path, plane: str):
    exams = [e for e in load_dataset(data).exams if e.plane == plane]
    if not exams:
        raise UsageError(f"dataset {data} has no {plane} exams")
    return exams


# --------------------------------------------------------------------------
# commands


def cmd_phantom_generate(args, cfg) -> None:
    params = PhantomParams.from_dict(cfg["phantom"]) if "phantom" in cfg else PhantomParams()
    planes = tuple(p.strip() for p in args.planes.split(",") if p.strip())
    for p in planes:
        if p not in PLANES:
            raise UsageError(f"unknown plane {p!r}; choose from {', '.join(PLANES)}")
    generate_dataset(args.patients, args.healthy, args.slices, planes, params, args.seed, args.out)
    print(f"wrote dataset to {args.out}")


def cmd_segment(args, cfg) -> None:
    params = _dataclass_from(ChanVeseParams, {"max_iter": 200, **cfg.get("chanvese", {})}, max_iter=args.max_iter)
    pixels = read_pgm(args.image)
    level, seg = segment(pixels, params, init=args.init)
    roi = tissue_roi(seg.mask)
    args.out.mkdir(parents=True, exist_ok=True)
    write_pgm(args.out / "mask.pgm", seg.mask.astype(np.float64))
    info = {
        "image": str(args.image),
        "iterations": level.iteration,
        "converged": level.converged,
        "energy_history": level.energy_history,
        "roi_bounding_box": list(roi.bounding_box),
        "roi_empty": roi.empty,
    }
    if not roi.empty:
        write_pgm(args.out / "crop.pgm", crop_roi(pixels, roi, args.margin, pixels.shape))
    (args.out / "segmentation.json").write_text(dumps_json(info))
    (args.out / "energy_history.csv").write_text(_csv([["iteration", "energy"], *enumerate(level.energy_history)]))
    print(f"segmented {args.image}: {level.iteration} iterations, ROI {roi.bounding_box}")


def cmd_train(args, cfg) -> None:
    if args.action == "regress":
        target = require_target(args.target)
        config = model_config(cfg, args, "regress", target)
        hyper = train_hyper(cfg, args, REGRESS_DEFAULTS, args.seed)
        model, run = train_regressor(_exams(args.data, args.plane), config, hyper)
    else:
        config = model_config(cfg, args, "classify", None)
        hyper = train_hyper(cfg, args, CLASSIFY_DEFAULTS, args.seed)
        policy = _dataclass_from(
            BalancingPolicy,
            cfg.get("policy", {}),
            mirror_healthy=False if args.no_mirror else None,
            subsample_injured_per_epoch=False if args.no_subsample else None,
            seed=args.seed,
        )
        model, run = train_classifier(_exams(args.data, args.plane), config, policy, hyper)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out / "model.ckpt")
    (args.out / "train_run.json").write_text(dumps_json({"config": config.to_dict(), "seed": model.seed, **run.summary()}))
    print(f"trained {config.head} model; final loss {run.loss_history[-1]:.6f}; saved {args.out / 'model.ckpt'}")


def _trunc(args, cfg) -> float:
    return args.trunc if args.trunc is not None else cfg.get("cv", {}).get("trunc_fraction", DEFAULT_TRUNC)


def cmd_score_exam(args, cfg) -> None:
    model = load_checkpoint(args.model)
    exams = _exams(args.data, model.config.plane)
    if args.exam:
        exams = [e for e in exams if e.exam_id == args.exam]
        if not exams:
            raise UsageError(f"exam {args.exam} not found among {model.config.plane} exams")
    trunc = _trunc(args, cfg)
    target = model.config.target
    rows = [["exam_id", "subject_id", "timepoint", "predicted", "ground_truth"]]
    for e in exams:
        rows.append([e.exam_id, e.patient_id, e.timepoint, predict_exam(model, e, trunc), e.ground_truth.score(target)])
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "exam_scores.csv").write_text(_csv(rows))
    print(f"scored {len(exams)} exams for {target}")


def cmd_pca_fit(args, cfg) -> None:
    model = load_checkpoint(args.model)
    exams = _exams(args.data, model.config.plane)
    pca = fit_feature_pca(model, exams, args.k)
    scores = exam_pc_scores(model, pca, exams, _trunc(args, cfg))
    mean_truth = [e.ground_truth.mean() for e in exams]
    r, degenerate = pearson([scores[e.exam_id] for e in exams], mean_truth)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "pca.json").write_text(dumps_json(pca.to_dict()))
    rows = [["exam_id", "subject_id", "timepoint", "pc1_score", "mean_healing_score"]]
    rows += [[e.exam_id, e.patient_id, e.timepoint, scores[e.exam_id], m] for e, m in zip(exams, mean_truth)]
    (args.out / "exam_pc_scores.csv").write_text(_csv(rows))
    (args.out / "correlation.json").write_text(dumps_json({"abs_pearson": abs(r), "degenerate": degenerate}))
    print(f"|Pearson| of exam PC1 scores vs mean healing score: {abs(r):.4f}")


def _cv_settings(args, cfg, roi_crop: bool) -> CVSettings:
    if args.task == "regress":
        target = require_target(args.target)
        config, defaults = model_config(cfg, args, "regress", target), REGRESS_DEFAULTS
    else:
        if args.target is not None:
            raise UsageError("--target only applies to --task regress")
        config, defaults = model_config(cfg, args, "classify", None), CLASSIFY_DEFAULTS
    cv = dict(cfg.get("cv", {}))
    unknown = set(cv) - {"k", "trunc_fraction", "correlation"}
    if unknown:
        raise UsageError(f"unknown cv keys: {sorted(unknown)}")
    policy = cfg.get("policy", {})
    return CVSettings(
        task=args.task,
        plane=args.plane,
        config=config,
        hyper=train_hyper(cfg, args, defaults, 0),
        k=args.folds or cv.get("k", 5),
        seed=args.seed,
        trunc_fraction=cv.get("trunc_fraction", DEFAULT_TRUNC),
        correlation=args.correlation or cv.get("correlation", "per-patient"),
        mirror_healthy=policy.get("mirror_healthy", True),
        subsample=policy.get("subsample_injured_per_epoch", True),
        roi_crop=roi_crop,
        chanvese=_dataclass_from(ChanVeseParams, {"max_iter": 200, **cfg.get("chanvese", {})}),
        semisupervised=not roi_crop,
    )


def cmd_evaluate_cv(args, cfg) -> None:
    if args.roi_compare and args.task != "classify":
        raise UsageError("--roi-compare applies to --task classify")
    exams = load_dataset(args.data).exams
    if not args.roi_compare:
        report = run_cv(exams, _cv_settings(args, cfg, args.roi_crop), args.workers)
        emit_report(report, args.out)
        print(_headline(report))
        return
    full = run_cv(exams, _cv_settings(args, cfg, False), args.workers)
    roi = run_cv(exams, _cv_settings(args, cfg, True), args.workers)
    emit_report(full, args.out / "full")
    emit_report(roi, args.out / "roi")
    table = roi_table(ExperimentResult(args.out, classify={args.plane: full}, classify_roi={args.plane: roi}))
    (args.out / "roi_comparison.csv").write_text(_csv(table))
    print(f"accuracy without ROI crop {table[1][1]:.3f}, with ROI crop {table[1][3]:.3f}")


def _headline(report) -> str:
    parts = [f"{name} {mean:.3f}±{sd:.3f}" for name, (mean, sd) in report.aggregate.items()]
    return f"{report.task} {report.plane}: " + ", ".join(parts)


def cmd_evaluate_experiment(args, cfg) -> None:
    overrides = {}
    if "phantom" in cfg:
        overrides["phantom"] = PhantomParams.from_dict(cfg["phantom"])
    if "chanvese" in cfg:
        overrides["chanvese"] = _dataclass_from(ChanVeseParams, cfg["chanvese"])
    result = run_experiment(args.out, args.seed, replace(ExperimentConfig(), **overrides), args.workers)
    for report in [*result.classify.values(), *result.classify_roi.values(), *result.regress.values()]:
        print(_headline(report))


def cmd_report(args, cfg) -> None:
    report = load_report(args.input)
    emit_report(report, args.out)
    print(_headline(report))


COMMANDS = {
    ("phantom", "generate"): cmd_phantom_generate,
    ("segment", None): cmd_segment,
    ("train", "classify"): cmd_train,
    ("train", "regress"): cmd_train,
    ("score", "exam"): cmd_score_exam,
    ("pca", "fit"): cmd_pca_fit,
    ("evaluate", "cv"): cmd_evaluate_cv,
    ("evaluate", "experiment"): cmd_evaluate_experiment,
    ("report", None): cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        cfg = load_config(args.config)
        COMMANDS[(args.command, getattr(args, "action", None))](args, cfg)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
