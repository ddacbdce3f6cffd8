"""Healing-progress scoring: classifier/regressor training, PCA scores and
exam-level aggregation.

Class definition for the classifier: slices from exams at timepoints 0 and 1
are injured (label 1), healthy-volunteer slices (timepoint -1) are healthy
(label 0), everything else is left out of classifier training.

Exam-level regression output is the truncated mean of the raw per-slice head
outputs, clamped to [1, 7] afterwards.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .models import SCORE_MAX, SCORE_MIN, TARGETS, Model, ModelConfig, build_model, extract_features, forward_head
from .optim import Optimizer
from .phantom import HEALTHY_TIMEPOINT, Exam
from .seeding import derive_seed, make_rng

INJURED_TIMEPOINTS = (0, 1)
DEFAULT_TRUNC = 0.1


class TrainingDataError(ValueError):
    pass


# --------------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, D), orthonormal rows
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"feature dimension {features.shape[-1]} != PCA dimension {self.mean.shape[0]}")
        return (features - self.mean) @ self.components.T

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PcaModel":
        return cls(
            np.asarray(data["mean"], dtype=np.float64),
            np.asarray(data["components"], dtype=np.float64).reshape(-1, len(data["mean"])),
            np.asarray(data["explained_variance"], dtype=np.float64),
        )


def pca_fit(features: np.ndarray, k: int = 1) -> PcaModel:
    """Principal components from the eigendecomposition of the sample
    covariance (denominator N - 1).

    Each component is flipped so its largest-magnitude element (first one on
    ties) is positive. Zero-variance directions come back as whatever
    orthonormal basis the eigensolver picks, with zero explained variance.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be an N x D matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if not 1 <= k <= min(n - 1, d):
        raise ValueError(f"k must lie in [1, {min(n - 1, d)}] for {n} samples of dimension {d}, got {k}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(-values, kind="stable")[:k]
    components = vectors[:, order].T.copy()
    lead = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(k), lead])
    components *= np.where(signs == 0, 1.0, signs)[:, None]
    return PcaModel(mean, components, np.clip(values[order], 0.0, None))


def semisupervised_slice_score(pca: PcaModel, feature: np.ndarray) -> float:
    """Projection of a feature vector on the first principal component."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != pca.mean.shape:
        raise ValueError(f"feature shape {feature.shape} != PCA mean shape {pca.mean.shape}")
    return float((feature - pca.mean) @ pca.components[0])


def exam_aggregate(scores: Iterable[float], trunc_fraction: float = DEFAULT_TRUNC) -> float:
    """Symmetric truncated mean: drop floor(trunc_fraction * n) values from each end."""
    values = np.sort(np.asarray(list(scores), dtype=np.float64))
    if values.size == 0:
        raise ValueError("cannot aggregate an empty score list")
    if not 0.0 <= trunc_fraction < 0.5:
        raise ValueError(f"trunc_fraction must lie in [0, 0.5), got {trunc_fraction}")
    cut = math.floor(trunc_fraction * values.size)
    return float(values[cut : values.size - cut].mean())


def slice_outputs(model: Model, exam: Exam) -> np.ndarray:
    """Raw head outputs for every slice of an exam."""
    if exam.plane != model.config.plane:
        raise ValueError(f"exam {exam.exam_id} is {exam.plane} but the model expects {model.config.plane}")
    return _raw_outputs(model, exam.stack())


def _raw_outputs(model: Model, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    rows = [forward_head(model, images[i : i + chunk]).data[:, 0] for i in range(0, len(images), chunk)]
    return np.concatenate(rows) if rows else np.zeros(0)


def predict_exam(model: Model, exam: Exam, trunc_fraction: float = DEFAULT_TRUNC) -> float:
    if model.config.head != "regress":
        raise ValueError("predict_exam needs a regression model")
    value = exam_aggregate(slice_outputs(model, exam), trunc_fraction)
    return float(min(max(value, SCORE_MIN), SCORE_MAX))


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 5
    batch_size: int = 16
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BalancingPolicy:
    """Healthy slices are joined by their horizontal mirror images; each
    epoch then draws, without replacement, as many slices from the larger
    class as the smaller class has."""

    mirror_healthy: bool = True
    subsample_injured_per_epoch: bool = True
    seed: int = 0

    def epoch_pool(self, injured: np.ndarray, healthy: np.ndarray, epoch: int) -> tuple[np.ndarray, np.ndarray]:
        """Images and labels for one epoch (unshuffled: injured first)."""
        if self.mirror_healthy:
            healthy = np.concatenate([healthy, healthy[..., ::-1]])
        if self.subsample_injured_per_epoch:
            n = min(len(injured), len(healthy))
            rng = make_rng(derive_seed(self.seed, "balance", epoch))
            if len(injured) > n:
                injured = injured[np.sort(rng.choice(len(injured), n, replace=False))]
            if len(healthy) > n:
                healthy = healthy[np.sort(rng.choice(len(healthy), n, replace=False))]
        images = np.concatenate([injured, healthy])
        labels = np.concatenate([np.ones(len(injured)), np.zeros(len(healthy))])
        return images, labels


@dataclass
class TrainRun:
    config: ModelConfig
    hyper: TrainHyper
    seed: int
    dataset: list[str]  # exam ids used for training
    loss_history: list[float] = field(default_factory=list)
    class_counts: list[tuple[int, int]] = field(default_factory=list)  # (injured, healthy) per epoch
    optimizer: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "hyper": self.hyper.to_dict(),
            "optimizer": self.optimizer,
            "loss_history": list(self.loss_history),
            "class_counts": [list(c) for c in self.class_counts],
            "n_exams": len(self.dataset),
        }


def classifier_label(timepoint: int) -> int | None:
    if timepoint in INJURED_TIMEPOINTS:
        return 1
    if timepoint == HEALTHY_TIMEPOINT:
        return 0
    return None


def _fit(
    model: Model, images: np.ndarray, targets: np.ndarray, hyper: TrainHyper, epoch: int, opt: Optimizer, loss_fn
) -> float:
    order = make_rng(derive_seed(hyper.seed, "shuffle", epoch)).permutation(len(images))
    total = 0.0
    for start in range(0, len(order), hyper.batch_size):
        idx = order[start : start + hyper.batch_size]
        opt.zero_grad()
        loss = loss_fn(forward_head(model, images[idx]), targets[idx][:, None])
        T.backward(loss)
        opt.step()
        total += loss.item() * len(idx)
    return total / len(order)


def _plane_exams(exams: Sequence[Exam], plane: str) -> list[Exam]:
    return [e for e in exams if e.plane == plane]


def train_classifier(
    exams: Sequence[Exam],
    config: ModelConfig,
    policy: BalancingPolicy | None = None,
    hyper: TrainHyper | None = None,
    transform=None,
) -> tuple[Model, TrainRun]:
    """Train an injured-vs-healthy slice classifier on the exams of ``config.plane``.

    ``transform`` optionally maps each (H, W) slice before training (ROI cropping).
    """
    if config.head != "classify":
        raise ValueError("train_classifier needs a classify config")
    policy = policy or BalancingPolicy()
    hyper = hyper or TrainHyper()
    used = [e for e in _plane_exams(exams, config.plane) if classifier_label(e.timepoint) is not None]
    if not used:
        raise TrainingDataError(f"no classifier training exams for plane {config.plane}")
    injured = _images([e for e in used if classifier_label(e.timepoint) == 1], transform)
    healthy = _images([e for e in used if classifier_label(e.timepoint) == 0], transform)
    if len(injured) == 0 or len(healthy) == 0:
        raise TrainingDataError(
            f"classifier training needs both classes; got {len(injured)} injured and {len(healthy)} healthy slices"
        )
    model = build_model(config, derive_seed(hyper.seed, "init"))
    opt = Optimizer(model.params, kind=hyper.optimizer, learning_rate=hyper.learning_rate)
    run = TrainRun(config, hyper, hyper.seed, [e.exam_id for e in used], optimizer=opt.hyperparameters())
    for epoch in range(hyper.epochs):
        images, labels = policy.epoch_pool(injured, healthy, epoch)
        run.class_counts.append((int(labels.sum()), int(len(labels) - labels.sum())))
        run.loss_history.append(_fit(model, images, labels, hyper, epoch, opt, T.loss_bce))
    model.training = run.summary()
    return model, run


def train_regressor(
    exams: Sequence[Exam], config: ModelConfig, hyper: TrainHyper | None = None
) -> tuple[Model, TrainRun]:
    """Train a scalar regressor for ``config.target`` on every exam of ``config.plane``."""
    if config.head != "regress" or config.target not in TARGETS:
        raise ValueError("train_regressor needs a regress config with a target")
    hyper = hyper or TrainHyper()
    used = _plane_exams(exams, config.plane)
    if not used:
        raise TrainingDataError(f"no regression training exams for plane {config.plane}")
    for exam in used:
        if exam.ground_truth is None:
            raise TrainingDataError(f"exam {exam.exam_id} has no ground truth")
    images = _images(used)
    targets = np.concatenate([np.full(len(e.slices), e.ground_truth.score(config.target)) for e in used])
    model = build_model(config, derive_seed(hyper.seed, "init"))
    opt = Optimizer(model.params, kind=hyper.optimizer, learning_rate=hyper.learning_rate)
    run = TrainRun(config, hyper, hyper.seed, [e.exam_id for e in used], optimizer=opt.hyperparameters())
    for epoch in range(hyper.epochs):
        run.loss_history.append(_fit(model, images, targets, hyper, epoch, opt, T.loss_mse))
    model.training = run.summary()
    return model, run


def _images(exams: Sequence[Exam], transform=None) -> np.ndarray:
    if not exams:
        return np.zeros((0, 1, 1, 1))
    stack = np.concatenate([e.stack() for e in exams])
    if transform is not None:
        stack = np.stack([transform(s[0]) for s in stack])[:, None]
    return stack


# --------------------------------------------------------------------------
# semi-supervised scoring


def exam_pc_scores(
    model: Model, pca: PcaModel, exams: Sequence[Exam], trunc_fraction: float = DEFAULT_TRUNC
) -> dict[str, float]:
    """Truncated-mean first-PC score of each exam."""
    out = {}
    for exam in exams:
        feats = extract_features(model, exam.stack())
        out[exam.exam_id] = exam_aggregate(pca.transform(feats)[:, 0], trunc_fraction)
    return out


def fit_feature_pca(model: Model, exams: Sequence[Exam], k: int = 1) -> PcaModel:
    """PCA of penultimate features pooled over every slice of ``exams``."""
    return pca_fit(extract_features(model, np.concatenate([e.stack() for e in exams])), k)


def semisupervised_correlation(
    model: Model, train_exams: Sequence[Exam], test_exams: Sequence[Exam], trunc_fraction: float = DEFAULT_TRUNC
) -> float:
    """|Pearson| between held-out exam PC scores and mean healing scores.

    Returns 0.0 when either series is constant.
    """
    pca = fit_feature_pca(model, train_exams)
    scores = exam_pc_scores(model, pca, test_exams, trunc_fraction)
    pc = np.array([scores[e.exam_id] for e in test_exams])
    truth = np.array([e.ground_truth.mean() for e in test_exams])
    if len(pc) < 2 or np.ptp(pc) == 0 or np.ptp(truth) == 0:
        return 0.0
    return float(abs(np.corrcoef(pc, truth)[0, 1]))
