"""Independent oracles shared by the test modules."""
import numpy as np


def numeric_grad(f, x, step=1e-5):
    """Central finite differences of scalar f() with respect to array x (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        grad[i] = (hi - lo) / (2 * step)
    return grad


def rel_error(analytic, numeric):
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8))


def naive_conv(x, k, b, stride=1, padding=0):
    """Loop-based cross-correlation."""
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for a in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    win = x[a, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[a, o, i, j] = np.sum(win * k[o]) + b[o]
    return out


def pairwise_auc(scores, labels):
    """Fraction of positive/negative pairs ordered correctly, ties count one half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def disk(size=96, radius=20, inside=0.8, outside=0.2):
    y, x = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    mask = (y - c) ** 2 + (x - c) ** 2 <= radius**2
    return np.where(mask, inside, outside), mask


def brute_force_pca(x):
    """Eigenpairs of the covariance built by explicit double loop."""
    n, d = x.shape
    mean = [sum(x[i, j] for i in range(n)) / n for j in range(d)]
    cov = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            cov[a, b] = sum((x[i, a] - mean[a]) * (x[i, b] - mean[b]) for i in range(n)) / (n - 1)
    values, vectors = np.linalg.eig(cov)
    order = np.argsort(-values.real)
    return values.real[order], vectors.real[:, order].T


# --------------------------------------------------------------------------
# gradient suite: each case maps a seed to (build, arrays) where
# build(*leaf_tensors) returns a scalar loss


def _leaf(arr):
    from tendonheal.tensor import Tensor

    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def grad_rel_error(build, arrays_):
    """Largest relative error between backprop and central differences over all inputs."""
    from tendonheal import tensor as T
    from tendonheal.tensor import Tensor

    leaves = [_leaf(a) for a in arrays_]
    T.backward(build(*leaves))
    worst = 0.0
    for t in leaves:
        num = numeric_grad(lambda: build(*[Tensor(l.data) for l in leaves]).item(), t.data)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def weighted(out, seed):
    """Random linear functional of ``out`` so every output element matters."""
    from tendonheal import tensor as T

    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.tensor_sum(T._make(out.data * w, (out,), lambda g: (g * w,), "mul_const"))


def _case_add(seed):
    from tendonheal import tensor as T

    rng = np.random.default_rng(seed)
    return (lambda x, y: weighted(T.add(x, y), seed)), [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]


def _case_reshape(seed):
    from tendonheal import tensor as T

    return (lambda x: weighted(T.reshape(x, (3, 4)), seed)), [np.random.default_rng(seed).normal(size=(2, 6))]


def _case_relu(seed):
    from tendonheal import tensor as T

    x = np.random.default_rng(seed).normal(size=(3, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep finite differences away from the kink
    return (lambda t: weighted(T.relu(t), seed)), [x]


def _case_affine(seed):
    from tendonheal import tensor as T

    rng = np.random.default_rng(seed)
    arrs = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)]
    return (lambda x, w, b: weighted(T.affine(x, w, b), seed)), arrs


def _case_conv(stride, padding):
    def case(seed):
        from tendonheal import tensor as T

        rng = np.random.default_rng(seed)
        arrs = [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
        return (lambda x, k, b: weighted(T.conv2d(x, k, b, stride, padding), seed)), arrs

    return case


def _case_pool(window, stride):
    def case(seed):
        from tendonheal import tensor as T

        x = np.random.default_rng(seed).permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.1  # distinct values
        return (lambda t: weighted(T.maxpool2d(t, window, stride), seed)), [x]

    return case


def _case_bce(seed):
    from tendonheal import tensor as T

    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=(5, 1)).astype(float)
    return (lambda z: T.loss_bce(z, labels)), [rng.normal(scale=3, size=(5, 1))]


def _case_mse(seed):
    from tendonheal import tensor as T

    rng = np.random.default_rng(seed)
    target = rng.normal(size=(5, 1))
    return (lambda p: T.loss_mse(p, target)), [rng.normal(size=(5, 1))]


def _case_small_cnn(seed):
    from tendonheal import tensor as T

    rng = np.random.default_rng(seed)
    arrs = [
        rng.uniform(size=(2, 1, 8, 8)),
        rng.normal(size=(2, 1, 3, 3)),
        rng.normal(size=2),
        rng.normal(size=(18, 1)),
        rng.normal(size=1),
    ]
    labels = np.array([[1.0], [0.0]])

    def build(x, k, b, w, c):
        h = T.maxpool2d(T.relu(T.conv2d(x, k, b)), 2, 2)
        return T.loss_bce(T.affine(T.reshape(h, (2, -1)), w, c), labels)

    return build, arrs


GRADIENT_CASES = {
    "add+sum": _case_add,
    "reshape": _case_reshape,
    "relu": _case_relu,
    "affine": _case_affine,
    "conv2d s1 p0": _case_conv(1, 0),
    "conv2d s2 p1": _case_conv(2, 1),
    "maxpool w2 s2": _case_pool(2, 2),
    "maxpool w3 s2": _case_pool(3, 2),
    "loss_bce": _case_bce,
    "loss_mse": _case_mse,
    "small cnn": _case_small_cnn,
}
GRADIENT_SEEDS = range(20)
