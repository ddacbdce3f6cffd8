import numpy as np
import pytest

from tendonheal.optim import Optimizer
from tendonheal.tensor import Tensor


def param(value, grad=None):
    t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    t.grad = None if grad is None else np.array(grad, dtype=np.float64)
    return t


def test_sgd_step():
    p = param([1.0], [2.0])
    opt = Optimizer({"p": p}, kind="sgd", learning_rate=0.1)
    opt.step()
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)
    assert opt.step_count == 1


def test_sgd_zero_grad_leaves_params():
    p = param([1.5, -2.0], [0.0, 0.0])
    Optimizer({"p": p}, kind="sgd", learning_rate=0.1).step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_zero_grad_only_decays_moments():
    p = param([1.5], [0.0])
    opt = Optimizer({"p": p}, kind="adam")
    opt.first_moment["p"][:] = 0.5
    opt.second_moment["p"][:] = 0.25
    opt.step()
    assert opt.step_count == 1
    assert opt.first_moment["p"][0] == pytest.approx(0.45)
    assert opt.second_moment["p"][0] == pytest.approx(0.24975)


def test_adam_zero_grad_from_fresh_state_is_noop():
    p = param([1.5], [0.0])
    Optimizer({"p": p}).step()
    assert p.data[0] == 1.5


def test_adam_first_step():
    p = param([0.0], [1.0])
    Optimizer({"p": p}, learning_rate=1e-3).step()
    # bias-corrected m = 1, v = 1 -> step lr * 1 / (1 + eps)
    assert -p.data[0] == pytest.approx(1e-3 / (1 + 1e-8), rel=1e-12)
    assert -p.data[0] < 1e-3


def test_momentum_accumulates_velocity():
    p = param([0.0], [1.0])
    opt = Optimizer({"p": p}, kind="momentum", learning_rate=0.1, momentum=0.9)
    opt.step()
    opt.step()
    assert p.data[0] == pytest.approx(-(0.1 * 1.0 + 0.1 * 1.9))


def test_buffers_exist_only_when_needed():
    p = param(np.zeros((2, 3)), np.zeros((2, 3)))
    sgd = Optimizer({"p": p}, kind="sgd")
    assert not sgd.velocity and not sgd.first_moment and not sgd.second_moment
    mom = Optimizer({"p": p}, kind="momentum")
    assert mom.velocity["p"].shape == (2, 3) and not mom.first_moment
    adam = Optimizer({"p": p}, kind="adam")
    assert adam.first_moment["p"].shape == adam.second_moment["p"].shape == (2, 3) and not adam.velocity


def test_missing_grad_names_parameter():
    opt = Optimizer({"head.weight": param([1.0])})
    with pytest.raises(ValueError, match="head.weight"):
        opt.step()


@pytest.mark.parametrize(
    "kwargs",
    [
        {"learning_rate": 0.0},
        {"momentum": 1.0},
        {"beta1": -0.1},
        {"beta2": 1.0},
        {"epsilon": 0.0},
        {"kind": "rmsprop"},
    ],
)
def test_invalid_hyperparameters(kwargs):
    with pytest.raises(ValueError):
        Optimizer({"p": param([1.0])}, **kwargs)


def test_determinism():
    results = []
    for _ in range(2):
        p = param([0.3, -0.2])
        opt = Optimizer({"p": p})
        for g in ([0.1, -0.4], [0.2, 0.0], [-1.0, 3.0]):
            p.grad = np.array(g)
            opt.step()
        results.append(p.data.tobytes())
    assert results[0] == results[1]
