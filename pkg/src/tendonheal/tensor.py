"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operators the compact CNN needs are provided: ``conv2d``,
``maxpool2d``, ``affine``, ``relu``, ``reshape``, ``add``, ``tensor_sum`` and
the two losses ``loss_bce`` / ``loss_mse``.

Conventions
-----------
* ``conv2d`` is a cross-correlation (the kernel is not flipped).
* ``maxpool2d`` routes the gradient to the first maximum of each window in
  row-major order.
* ``relu`` uses subgradient 0 at x == 0.

Every op builds its output with a ``_backward`` closure; :func:`backward`
walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "build_graph",
    "backward",
    "conv2d",
    "maxpool2d",
    "affine",
    "relu",
    "reshape",
    "add",
    "tensor_sum",
    "loss_bce",
    "loss_mse",
    "debug_mode",
    "is_debug",
]

_DEBUG = False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def is_debug() -> bool:
    return _DEBUG


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Check every forward value and gradient for NaN/Inf while active."""
    global _DEBUG
    previous = _DEBUG
    _DEBUG = enabled
    try:
        yield
    finally:
        _DEBUG = previous


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value in {what}")


class Tensor:
    """A float64 array node in an autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = fn if out.requires_grad else None
    out._op = op
    return out


# --------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Nodes reachable from a root, inputs before outputs."""

    nodes: list[Tensor] = field(default_factory=list)

    def index(self, tensor: Tensor) -> int:
        for i, node in enumerate(self.nodes):
            if node is tensor:
                return i
        raise KeyError("tensor is not part of this graph")


def build_graph(root: Tensor) -> Graph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return Graph(order)


def backward(loss: Tensor) -> Graph:
    """Populate ``.grad`` on every differentiable tensor reachable from ``loss``.

    Leaf gradients accumulate into an existing ``.grad`` buffer, so call
    ``zero_grad`` on parameters between steps. Tensors that were created with
    ``requires_grad=False`` (or detached) are not touched.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = build_graph(loss)
    if not loss.requires_grad:
        return graph
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, f"gradient of {node._op}")
        if node._parents:
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        elif node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
    return graph


# --------------------------------------------------------------------------
# operators


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (N, D) and ``weight`` (D, M)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias {bias.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data

    def fn(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _make(xd @ wd + bias.data, (x, weight, bias), fn, "affine")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (N, C, H, W) input with (F, C, kH, kW) kernel."""
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias {bias.shape} incompatible with kernel {kernel.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C, kH, kW) -> rows of patches
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(f, -1)
    out = (cols @ kmat.T + bias.data).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    xp_shape = xp.shape

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (g2.T @ cols).reshape(kernel.shape)
        db = g2.sum(axis=0)
        if not x.requires_grad:
            return None, dk, db
        dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
        # scatter patches back in NHWC layout, then transpose once
        dxp = np.zeros((xp_shape[0], xp_shape[2], xp_shape[3], xp_shape[1]))
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, :, i, j]
        dxp = dxp.transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dk, db

    return _make(out, (x, kernel, bias), fn, "conv2d")


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError(f"maxpool2d: window and stride must be positive, got {window}, {stride}")
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected (N, C, H, W) input, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} larger than spatial extent {(h, w)}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    # one strided view per window offset, in row-major offset order
    offsets = [(i, j) for i in range(window) for j in range(window)]

    def view(arr, i, j):
        return arr[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]

    out = view(x.data, 0, 0).copy()
    for i, j in offsets[1:]:
        np.maximum(out, view(x.data, i, j), out=out)

    def fn(g):
        dx = np.zeros(x.shape)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in offsets:
            hit = view(x.data, i, j) == out
            hit &= ~taken
            taken |= hit
            view(dx, i, j)[...] += np.where(hit, g, 0.0)
        return (dx,)

    return _make(out, (x,), fn, "maxpool2d")


def loss_bce(logit: Tensor, label) -> Tensor:
    """Mean binary cross-entropy on logits, ``mean(log(1 + exp(-s * z)))`` with s = 2y - 1."""
    y = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=np.float64)
    if y.shape != logit.shape:
        raise ShapeError(f"loss_bce: logits {logit.shape} and labels {y.shape} differ")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("loss_bce: labels must be exactly 0 or 1")
    s = 2.0 * y - 1.0
    t = -s * logit.data
    value = np.logaddexp(0.0, t).mean()
    count = y.size

    def fn(g):
        # d/dz log(1+exp(-s z)) = -s * sigmoid(-s z)
        sig = np.exp(-np.logaddexp(0.0, -t))
        return (float(g) * (-s * sig) / count,)

    return _make(np.array(value), (logit,), fn, "loss_bce")


def loss_mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"loss_mse: prediction {pred.shape} and target {t.shape} differ")
    diff = pred.data - t
    count = diff.size
    return _make(
        np.array((diff**2).mean()),
        (pred,),
        lambda g: (float(g) * 2.0 * diff / count,),
        "loss_mse",
    )
