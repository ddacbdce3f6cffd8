"""Subject-level k-fold cross-validation and the metrics reported from it.

Sentinels for undefined ratios: precision with no positive predictions and
recall with no positive labels are reported as 1.0 and flagged. A Pearson
correlation with a constant series is reported as 0.0 and flagged.
Aggregates are the mean and sample standard deviation (ddof 1, 0 for a
single fold) of the per-fold values; missing per-fold values are skipped.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .chanvese import ChanVeseParams, EmptyRoiError, crop_roi, segment, tissue_roi
from .models import TARGETS, ModelConfig, predict
from .phantom import HEALTHY_TIMEPOINT, Exam
from .scoring import (
    DEFAULT_TRUNC,
    BalancingPolicy,
    TrainHyper,
    classifier_label,
    predict_exam,
    semisupervised_correlation,
    train_classifier,
    train_regressor,
)
from .seeding import derive_seed, make_rng

FISHER_CLAMP = 1.0 - 1e-12
CLASSIFY_METRICS = ("accuracy", "precision", "recall", "auc", "pc1_abs_corr")
REGRESS_METRICS = ("mae", "max_ae", "corr")


class CVError(ValueError):
    pass


# --------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int]
    seed: int

    def members(self, fold: int) -> list[str]:
        return [s for s, f in self.assignments.items() if f == fold]

    def sizes(self) -> list[int]:
        return [len(self.members(f)) for f in range(self.k)]


def make_folds(subject_ids: Sequence[str], k: int = 5, seed: int = 0, strata: Mapping[str, str] | None = None) -> FoldPlan:
    """Shuffle subjects by seed and deal them round-robin into k folds.

    With ``strata`` (subject -> group), each group is shuffled on its own and
    the groups are dealt one after another in sorted group order, so every
    group spreads evenly over the folds while total sizes still differ by at
    most one.
    """
    ids = sorted(set(subject_ids))
    if len(ids) != len(subject_ids):
        raise CVError("subject ids must be unique")
    if k < 1:
        raise CVError(f"k must be positive, got {k}")
    if k > len(ids):
        raise CVError(f"k={k} exceeds the number of subjects ({len(ids)})")
    groups: dict[str, list[str]] = {}
    for sid in ids:
        groups.setdefault(strata.get(sid, "") if strata else "", []).append(sid)
    order: list[str] = []
    for name in sorted(groups):
        rng = make_rng(derive_seed(seed, "folds", name))
        order.extend(groups[name][i] for i in rng.permutation(len(groups[name])))
    return FoldPlan(k, {sid: i % k for i, sid in enumerate(order)}, seed)


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    precision_undefined: bool = False
    recall_undefined: bool = False

    def __iter__(self):
        return iter((self.accuracy, self.precision, self.recall))


def classification_metrics(predictions, labels, threshold: float = 0.5) -> ClassificationMetrics:
    """Accuracy, precision, recall with injured (1) as the positive class;
    a slice is predicted positive when its probability is >= threshold."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} must be equal-length vectors")
    if p.size == 0:
        raise ValueError("no predictions to score")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pred = p >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    accuracy = float(np.mean(pred == pos))
    precision = tp / int(pred.sum()) if pred.any() else 1.0
    recall = tp / int(pos.sum()) if pos.any() else 1.0
    return ClassificationMetrics(accuracy, float(precision), float(recall), not pred.any(), not pos.any())


@dataclass
class CurvePoints:
    kind: str  # "roc" (x=FPR, y=TPR) or "pr" (x=recall, y=precision)
    x: list[float]
    y: list[float]
    thresholds: list[float]

    def __len__(self) -> int:
        return len(self.x)


def roc_pr(scores, labels) -> tuple[CurvePoints, float, CurvePoints]:
    """ROC and PR curves from a sweep over the distinct scores (descending,
    a slice is positive when score >= threshold) and the trapezoid ROC AUC.

    Both curves start at threshold +inf: ROC at (0, 0), PR at (0, 1).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos, n_neg = int(np.sum(y == 1)), int(np.sum(y == 0))
    if n_pos + n_neg != y.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC/PR need both classes among the labels")
    thresholds = np.unique(s)[::-1]
    tp = np.array([np.sum((s >= t) & (y == 1)) for t in thresholds], dtype=np.float64)
    fp = np.array([np.sum((s >= t) & (y == 0)) for t in thresholds], dtype=np.float64)
    fpr = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    all_t = [math.inf, *thresholds.tolist()]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    roc = CurvePoints("roc", fpr.tolist(), tpr.tolist(), all_t)
    pr = CurvePoints("pr", tpr.tolist(), precision.tolist(), list(all_t))
    return roc, auc, pr


def regression_metrics(predictions: Mapping[str, float], labels: Mapping[str, float]) -> tuple[float, float]:
    """(MAE, MAX-AE) over exams, matched by exam id."""
    missing = sorted(set(predictions) ^ set(labels))
    if missing:
        raise ValueError(f"unmatched exam ids: {', '.join(missing)}")
    if not predictions:
        raise ValueError("no exams to score")
    err = np.array([abs(predictions[k] - labels[k]) for k in sorted(predictions)])
    return float(err.mean()), float(err.max())


def mean_correlation_fisher(correlations) -> float:
    """tanh of the mean of atanh(r); |r| is clamped to 1 - 1e-12 first."""
    r = np.asarray(list(correlations), dtype=np.float64)
    if r.size == 0:
        raise ValueError("no correlations to average")
    if np.any(~np.isfinite(r)) or np.any(np.abs(r) > 1.0 + 1e-9):
        raise ValueError(f"correlations must lie in [-1, 1], got {r[np.abs(r) > 1.0 + 1e-9].tolist()}")
    z = np.arctanh(np.clip(r, -FISHER_CLAMP, FISHER_CLAMP))
    return float(np.tanh(z.mean()))


def pearson(x, y) -> tuple[float, bool]:
    """Pearson correlation and a degenerate flag (constant series -> 0.0, True)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"series must be aligned vectors, got {x.shape} and {y.shape}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0)), False


def per_patient_correlation(pred_series, label_series) -> float:
    """Pearson correlation of one patient's predicted and true exam scores
    across timepoints (at least three)."""
    if len(pred_series) != len(label_series):
        raise ValueError(f"series lengths differ: {len(pred_series)} vs {len(label_series)}")
    if len(pred_series) < 3:
        raise ValueError(f"need at least 3 timepoints, got {len(pred_series)}")
    return pearson(pred_series, label_series)[0]


# --------------------------------------------------------------------------
# reports


def aggregate_metrics(folds: Sequence[Mapping], names: Sequence[str]) -> dict[str, list[float]]:
    out = {}
    for name in names:
        values = [f[name] for f in folds if f.get(name) is not None]
        if not values:
            continue
        arr = np.asarray(values, dtype=np.float64)
        sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out[name] = [float(arr.mean()), sd]
    return out


@dataclass
class CVReport:
    task: str
    plane: str
    target: str | None
    k: int
    seed: int
    folds: list[dict]
    predictions: list[dict]  # exam_id, subject_id, timepoint, predicted, ground_truth, fold
    aggregate: dict[str, list[float]] = field(default_factory=dict)
    assignments: dict[str, int] = field(default_factory=dict)
    slice_scores: list[list[float]] = field(default_factory=list)  # [score, label] for classification
    correlations: dict[str, float] = field(default_factory=dict)  # per patient, regression only
    summary: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    @property
    def metric_names(self) -> tuple[str, ...]:
        return CLASSIFY_METRICS if self.task == "classify" else REGRESS_METRICS

    def recompute(self) -> dict[str, list[float]]:
        return aggregate_metrics(self.folds, self.metric_names)

    def check(self) -> None:
        if not self.folds or not self.predictions:
            raise CVError("report has no folds or no predictions")
        if self.recompute() != self.aggregate:
            raise CVError("aggregate metrics do not match the per-fold records")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "plane": self.plane,
            "target": self.target,
            "k": self.k,
            "seed": self.seed,
            "folds": self.folds,
            "aggregate": self.aggregate,
            "predictions": self.predictions,
            "assignments": self.assignments,
            "slice_scores": self.slice_scores,
            "correlations": self.correlations,
            "summary": self.summary,
            "settings": self.settings,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CVReport":
        report = cls(**data)
        report.check()
        return report


# --------------------------------------------------------------------------
# cross-validation


def roi_crop_transform(params: ChanVeseParams, input_size: tuple[int, int], margin: int = 4) -> Callable:
    """Slice -> Chan-Vese ROI crop resized to the model input.

    The level set starts from the smoothed intensities, and the crop box
    covers the large segmented components away from the skin line
    (:func:`tissue_roi`). The uncropped slice is kept when nothing is left.
    """

    def transform(pixels: np.ndarray) -> np.ndarray:
        _, seg = segment(pixels, params, init="intensity")
        roi = tissue_roi(seg.mask)
        try:
            return crop_roi(pixels, roi, margin=margin, out_size=input_size)
        except EmptyRoiError:
            return pixels.copy()

    return transform


def _crop_exams(exams: Sequence[Exam], transform) -> list[Exam]:
    out = []
    for e in exams:
        slices = [type(s)(transform(s.pixels), s.plane, s.patient_id, s.timepoint, s.slice_index, s.seed) for s in e.slices]
        out.append(Exam(e.patient_id, e.timepoint, e.plane, slices, e.ground_truth))
    return out


@dataclass(frozen=True)
class CVSettings:
    task: str
    plane: str
    config: ModelConfig
    hyper: TrainHyper
    k: int = 5
    seed: int = 0
    trunc_fraction: float = DEFAULT_TRUNC
    correlation: str = "per-patient"  # or "per-fold"
    mirror_healthy: bool = True
    subsample: bool = True
    roi_crop: bool = False
    chanvese: ChanVeseParams = ChanVeseParams(max_iter=200)
    semisupervised: bool = True

    def to_dict(self) -> dict:
        cv = self.chanvese
        return {
            "task": self.task,
            "plane": self.plane,
            "config": self.config.to_dict(),
            "hyper": self.hyper.to_dict(),
            "k": self.k,
            "seed": self.seed,
            "trunc_fraction": self.trunc_fraction,
            "correlation": self.correlation,
            "mirror_healthy": self.mirror_healthy,
            "subsample": self.subsample,
            "roi_crop": self.roi_crop,
            "chanvese": {k: getattr(cv, k) for k in cv.__dataclass_fields__},
            "semisupervised": self.semisupervised,
        }


def validate_cv(exams: Sequence[Exam], s: CVSettings) -> list[Exam]:
    """Check task/label consistency; returns the exams of the requested plane."""
    if s.task not in ("classify", "regress"):
        raise CVError(f"task must be 'classify' or 'regress', got {s.task!r}")
    if s.correlation not in ("per-patient", "per-fold"):
        raise CVError(f"correlation must be 'per-patient' or 'per-fold', got {s.correlation!r}")
    if s.config.plane != s.plane:
        raise CVError(f"model config plane {s.config.plane} differs from CV plane {s.plane}")
    plane_exams = [e for e in exams if e.plane == s.plane]
    if not plane_exams:
        raise CVError(f"dataset has no {s.plane} exams")
    if s.task == "classify":
        if s.config.head != "classify":
            raise CVError("classification CV needs a classify model config")
        labels = {classifier_label(e.timepoint) for e in plane_exams}
        if not {0, 1} <= labels:
            raise CVError("classification needs injured (timepoint 0/1) and healthy (timepoint -1) exams")
    else:
        if s.config.head != "regress" or s.config.target not in TARGETS:
            raise CVError(f"regression CV needs a regress config with a target among {', '.join(TARGETS)}")
        for e in plane_exams:
            if e.ground_truth is None:
                raise CVError(f"exam {e.exam_id} has no ground truth")
    subjects = {e.patient_id for e in plane_exams}
    if len(subjects) < s.k:
        raise CVError(f"k={s.k} exceeds the number of subjects ({len(subjects)})")
    return plane_exams


def _run_fold(args) -> dict:
    fold, train, test, s = args
    hyper = TrainHyper(**{**s.hyper.to_dict(), "seed": derive_seed(s.seed, "fold", fold)})
    if s.task == "classify":
        policy = BalancingPolicy(s.mirror_healthy, s.subsample, derive_seed(s.seed, "balance", fold))
        model, run = train_classifier(train, s.config, policy, hyper)
        evaluated = [e for e in test if classifier_label(e.timepoint) is not None]
        rows, scores = [], []
        for e in evaluated:
            p = predict(model, e.stack())[:, 0]
            label = classifier_label(e.timepoint)
            scores.extend([float(v), label] for v in p)
            rows.append(_row(e, float(p.mean()), float(label), fold))
        probs = np.array([v for v, _ in scores])
        labels = np.array([l for _, l in scores])
        m = classification_metrics(probs, labels)
        auc = roc_pr(probs, labels)[1] if 0 < labels.sum() < len(labels) else None
        record = {
            "accuracy": m.accuracy,
            "precision": m.precision,
            "recall": m.recall,
            "precision_undefined": m.precision_undefined,
            "auc": auc,
            "pc1_abs_corr": semisupervised_correlation(model, train, test, s.trunc_fraction)
            if s.semisupervised
            else None,
        }
    else:
        model, run = train_regressor(train, s.config, hyper)
        rows = [_row(e, predict_exam(model, e, s.trunc_fraction), e.ground_truth.score(s.config.target), fold) for e in test]
        scores = []
        mae, max_ae = regression_metrics(
            {r["exam_id"]: r["predicted"] for r in rows}, {r["exam_id"]: r["ground_truth"] for r in rows}
        )
        record = {"mae": mae, "max_ae": max_ae}
    record.update(
        fold=fold,
        n_train_subjects=len({e.patient_id for e in train}),
        n_test_subjects=len({e.patient_id for e in test}),
        loss_history=run.loss_history,
    )
    return {"record": record, "rows": rows, "scores": scores}


def _row(exam: Exam, predicted: float, truth: float, fold: int) -> dict:
    return {
        "exam_id": exam.exam_id,
        "subject_id": exam.patient_id,
        "timepoint": exam.timepoint,
        "predicted": predicted,
        "ground_truth": truth,
        "fold": fold,
    }


def patient_correlations(rows: Sequence[dict]) -> tuple[dict[str, float], list[str]]:
    """Per-patient correlations (patients with >= 3 exams) and the ids whose
    series were degenerate."""
    series: dict[str, list[dict]] = {}
    for r in rows:
        if r["timepoint"] != HEALTHY_TIMEPOINT:
            series.setdefault(r["subject_id"], []).append(r)
    out, degenerate = {}, []
    for sid in sorted(series):
        items = sorted(series[sid], key=lambda r: r["timepoint"])
        if len(items) < 3:
            continue
        r, flag = pearson([i["predicted"] for i in items], [i["ground_truth"] for i in items])
        out[sid] = r
        if flag:
            degenerate.append(sid)
    return out, degenerate


def run_cv(exams: Sequence[Exam], settings: CVSettings, workers: int = 1) -> CVReport:
    s = settings
    plane_exams = validate_cv(exams, s)
    kinds = {e.patient_id: e.kind for e in plane_exams}
    plan = make_folds(sorted(kinds), s.k, derive_seed(s.seed, "plan"), strata=kinds)
    if s.roi_crop:
        transform = roi_crop_transform(s.chanvese, s.config.input_size)
        keep = plane_exams if s.task == "regress" else [e for e in plane_exams if classifier_label(e.timepoint) is not None]
        plane_exams = _crop_exams(keep, transform)
    jobs = []
    for fold in range(s.k):
        test_ids = set(plan.members(fold))
        train = [e for e in plane_exams if e.patient_id not in test_ids]
        test = [e for e in plane_exams if e.patient_id in test_ids]
        jobs.append((fold, train, test, s))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]

    folds = [r["record"] for r in results]
    rows = [row for r in results for row in r["rows"]]
    report = CVReport(
        task=s.task,
        plane=s.plane,
        target=s.config.target,
        k=s.k,
        seed=s.seed,
        folds=folds,
        predictions=rows,
        assignments=dict(sorted(plan.assignments.items())),
        slice_scores=[sc for r in results for sc in r["scores"]],
        settings=s.to_dict(),
    )
    if s.task == "classify":
        probs = np.array([v for v, _ in report.slice_scores])
        labels = np.array([l for _, l in report.slice_scores])
        report.summary = {"pooled_auc": roc_pr(probs, labels)[1]}
    else:
        corr, degenerate = patient_correlations(rows)
        report.correlations = corr
        if s.correlation == "per-patient":
            for f in folds:
                fold_corr = [corr[sid] for sid in plan.members(f["fold"]) if sid in corr]
                f["corr"] = mean_correlation_fisher(fold_corr) if fold_corr else None
            overall = mean_correlation_fisher(corr.values()) if corr else None
        else:
            for f in folds:
                fold_rows = [r for r in rows if r["fold"] == f["fold"]]
                f["corr"] = pearson([r["predicted"] for r in fold_rows], [r["ground_truth"] for r in fold_rows])[0]
            values = [f["corr"] for f in folds]
            overall = mean_correlation_fisher(values)
        errors = [abs(r["predicted"] - r["ground_truth"]) for r in rows]
        report.summary = {
            "fisher_mean_correlation": overall,
            "degenerate_correlations": degenerate,
            "overall_mae": float(np.mean(errors)),
            "overall_max_ae": float(np.max(errors)),
        }
    report.aggregate = report.recompute()
    return report
