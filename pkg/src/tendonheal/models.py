"""Compact CNN family with a classification or regression head.

Architecture for a config with blocks ``[(f1, k, p), (f2, k, p), ...]``::

    input (N, 1, H, W)
    -> [conv k x k (valid) -> relu -> maxpool p] per block
    -> flatten -> affine(feature_dim) -> relu      # penultimate features
    -> affine(1)                                   # head

Initialization is fan-in scaled uniform, drawn in parameter order from one
Philox stream keyed by the build seed: hidden weights use
``U(-sqrt(6 / fan_in), sqrt(6 / fan_in))``, the head weight uses
``U(-sqrt(1 / fan_in), sqrt(1 / fan_in))``. Biases start at zero, except the
regression head bias which starts at 4.0, the middle of the 1..7 score scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
from scipy.special import expit

from . import tensor as T
from .seeding import make_rng
from .tensor import Tensor

PLANES = ("sagittal", "axial")
TARGETS = ("SCT", "TT", "STE", "TE", "TU", "TisE")
HEADS = ("classify", "regress")
SCORE_MIN, SCORE_MAX = 1.0, 7.0
_PROB_EPS = 2.0**-53
_CHUNK = 64


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (96, 96)
    conv_blocks: tuple[tuple[int, int, int], ...] = ((8, 3, 2), (16, 3, 2), (32, 3, 2))
    feature_dim: int = 64
    head: str = "classify"
    plane: str = "sagittal"
    target: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        blocks = []
        for block in self.conv_blocks:
            block = tuple(int(v) for v in block)
            if len(block) == 1:
                block = (block[0], 3, 2)
            if len(block) != 3 or min(block) < 1:
                raise ConfigError(f"conv block must be (filters, kernel, pool) of positive ints, got {block}")
            blocks.append(block)
        object.__setattr__(self, "conv_blocks", tuple(blocks))
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError(f"input_size must be two positive ints, got {self.input_size}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be positive, got {self.feature_dim}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.plane not in PLANES:
            raise ConfigError(f"plane must be one of {PLANES}, got {self.plane!r}")
        if self.head == "regress" and self.target not in TARGETS:
            raise ConfigError(f"regress head needs a target among {', '.join(TARGETS)}; got {self.target!r}")
        if self.head == "classify" and self.target is not None:
            raise ConfigError("classify head takes no target")
        self.feature_map_shape()

    def feature_map_shape(self) -> tuple[int, int, int]:
        """(channels, height, width) after the last conv block."""
        c, (h, w) = 1, self.input_size
        for i, (filters, kernel, pool) in enumerate(self.conv_blocks):
            h, w = h - kernel + 1, w - kernel + 1
            if h < pool or w < pool:
                raise ConfigError(f"conv block {i} collapses the {self.input_size} input below 1x1")
            h, w = (h - pool) // pool + 1, (w - pool) // pool + 1
            c = filters
        return c, h, w

    def flat_dim(self) -> int:
        c, h, w = self.feature_map_shape()
        return c * h * w

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        channels = 1
        for i, (filters, kernel, _) in enumerate(self.conv_blocks, start=1):
            shapes[f"conv{i}.weight"] = (filters, channels, kernel, kernel)
            shapes[f"conv{i}.bias"] = (filters,)
            channels = filters
        shapes["fc.weight"] = (self.flat_dim(), self.feature_dim)
        shapes["fc.bias"] = (self.feature_dim,)
        shapes["head.weight"] = (self.feature_dim, 1)
        shapes["head.bias"] = (1,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "conv_blocks": [list(b) for b in self.conv_blocks],
            "feature_dim": self.feature_dim,
            "head": self.head,
            "plane": self.plane,
            "target": self.target,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {"input_size", "conv_blocks", "feature_dim", "head", "plane", "target"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "conv_blocks" in kwargs:
            kwargs["conv_blocks"] = tuple(tuple(b) for b in kwargs["conv_blocks"])
        return cls(**kwargs)


PRESETS: dict[str, ModelConfig] = {
    "small": ModelConfig(conv_blocks=((4, 3, 2), (8, 3, 2), (16, 3, 2)), feature_dim=32),
    "medium": ModelConfig(),
    "large": ModelConfig(conv_blocks=((16, 3, 2), (32, 3, 2), (64, 3, 2)), feature_dim=128),
}


def preset(name: str, **overrides) -> ModelConfig:
    """A named size variant ("small", "medium", "large") with field overrides."""
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    seed: int = 0
    training: dict = field(default_factory=dict)

    @property
    def penultimate_index(self) -> int:
        """Layer index of the feature layer (conv blocks come first)."""
        return len(self.config.conv_blocks)

    def parameters(self) -> Iterable[Tensor]:
        return self.params.values()


def build_model(config: ModelConfig, seed: int) -> Model:
    rng = make_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in config.parameter_shapes().items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
            if name == "head.bias" and config.head == "regress":
                data[:] = 0.5 * (SCORE_MIN + SCORE_MAX)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            scale = 1.0 if name == "head.weight" else 6.0
            bound = np.sqrt(scale / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Model(config=config, params=params, seed=int(seed))


def _as_batch(model: Model, batch) -> Tensor:
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    expected = (1, *model.config.input_size)
    if data.ndim != 4 or data.shape[1:] != expected:
        raise T.ShapeError(f"expected batch of shape (N, {', '.join(map(str, expected))}), got {data.shape}")
    return batch if isinstance(batch, Tensor) else Tensor(data)


def forward_features(model: Model, batch) -> Tensor:
    """Penultimate (post-ReLU) activations, shape (N, feature_dim)."""
    x = _as_batch(model, batch)
    p = model.params
    h = x
    for i, (_, _, pool) in enumerate(model.config.conv_blocks, start=1):
        h = T.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
        h = T.maxpool2d(T.relu(h), pool, pool)
    h = T.reshape(h, (h.shape[0], -1))
    return T.relu(T.affine(h, p["fc.weight"], p["fc.bias"]))


def forward_head(model: Model, batch) -> Tensor:
    """Raw head output (logit or unclamped score), shape (N, 1)."""
    features = forward_features(model, batch)
    return T.affine(features, model.params["head.weight"], model.params["head.bias"])


def finalize(config: ModelConfig, raw: np.ndarray) -> np.ndarray:
    if config.head == "classify":
        return np.clip(expit(raw), _PROB_EPS, 1.0 - _PROB_EPS)
    return np.clip(raw, SCORE_MIN, SCORE_MAX)


def extract_features(model: Model, images: np.ndarray, chunk: int = _CHUNK) -> np.ndarray:
    """``forward_features`` over a large (N, 1, H, W) array, chunked, as numpy."""
    images = np.asarray(images, dtype=np.float64)
    rows = [forward_features(model, images[i : i + chunk]).data for i in range(0, len(images), chunk)]
    return np.concatenate(rows) if rows else np.zeros((0, model.config.feature_dim))


def predict(model: Model, batch, chunk: int = _CHUNK) -> np.ndarray:
    """Probabilities in (0, 1) for classifiers, scores clamped to [1, 7] for regressors."""
    data = _as_batch(model, batch).data
    raw = [forward_head(model, data[i : i + chunk]).data for i in range(0, len(data), chunk)]
    out = np.concatenate(raw) if raw else np.zeros((0, 1))
    return finalize(model.config, out)
