import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tendonheal import tensor as T
from tendonheal.models import (
    PRESETS,
    ConfigError,
    ModelConfig,
    build_model,
    extract_features,
    finalize,
    forward_features,
    predict,
    preset,
)

SMALL = ModelConfig(input_size=(24, 24), conv_blocks=((3, 3, 2), (4, 3, 2)), feature_dim=8)


def test_build_is_deterministic():
    a, b = build_model(ModelConfig(), 42), build_model(ModelConfig(), 42)
    assert list(a.params) == list(b.params)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    c = build_model(ModelConfig(), 43)
    assert c.params["conv1.weight"].data.tobytes() != a.params["conv1.weight"].data.tobytes()


def test_default_feature_length():
    model = build_model(ModelConfig(), 0)
    assert forward_features(model, np.zeros((2, 1, 96, 96))).shape == (2, 64)
    assert model.penultimate_index == 3


def test_single_block_flat_dim():
    config = ModelConfig(conv_blocks=((8, 3, 2),))
    assert config.feature_map_shape() == (8, 47, 47)
    assert config.parameter_shapes()["fc.weight"] == (8 * 47 * 47, 64)


def test_parameter_shapes_follow_config():
    model = build_model(SMALL, 1)
    assert {k: v.shape for k, v in model.params.items()} == SMALL.parameter_shapes()
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL


def test_init_bounds():
    model = build_model(ModelConfig(), 5)
    w = model.params["conv2.weight"].data
    assert np.abs(w).max() <= np.sqrt(6 / (8 * 9))
    assert np.abs(model.params["head.weight"].data).max() <= np.sqrt(1 / 64)
    assert np.all(model.params["fc.bias"].data == 0)
    reg = build_model(ModelConfig(head="regress", target="TT"), 5)
    assert reg.params["head.bias"].data[0] == 4.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"head": "regress"},
        {"head": "regress", "target": "XX"},
        {"head": "classify", "target": "TT"},
        {"input_size": (8, 8)},
        {"plane": "coronal"},
        {"feature_dim": 0},
    ],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_regress_without_target_lists_targets():
    with pytest.raises(ConfigError, match="SCT, TT, STE, TE, TU, TisE"):
        ModelConfig(head="regress")


def test_presets_grow():
    sizes = [sum(np.prod(s) for s in PRESETS[n].parameter_shapes().values()) for n in ("small", "medium", "large")]
    assert sizes[0] < sizes[1] < sizes[2]
    assert preset("small", plane="axial").plane == "axial"
    with pytest.raises(ConfigError):
        preset("huge")


def test_zero_image_features_are_deterministic():
    model = build_model(SMALL, 3)
    a = forward_features(model, np.zeros((1, 1, 24, 24))).data
    b = forward_features(model, np.zeros((1, 1, 24, 24))).data
    assert a.tobytes() == b.tobytes()
    # all biases are zero, so a blank image gives all-zero features
    np.testing.assert_array_equal(a, 0.0)


def test_identical_rows_identical_features():
    x = np.random.default_rng(0).uniform(size=(1, 1, 24, 24))
    feats = forward_features(build_model(SMALL, 3), np.concatenate([x, x])).data
    assert feats[0].tobytes() == feats[1].tobytes()


def test_wrong_input_size_rejected():
    with pytest.raises(T.ShapeError):
        forward_features(build_model(SMALL, 0), np.zeros((1, 1, 25, 24)))
    with pytest.raises(T.ShapeError):
        forward_features(build_model(SMALL, 0), np.zeros((1, 24, 24)))


def test_zeroed_head_gives_half():
    model = build_model(SMALL, 0)
    model.params["head.weight"].data[:] = 0.0
    p = predict(model, np.random.default_rng(0).uniform(size=(3, 1, 24, 24)))
    np.testing.assert_array_equal(p, 0.5)


def test_regression_clamp():
    config = ModelConfig(head="regress", target="TU")
    np.testing.assert_array_equal(finalize(config, np.array([[9.3], [4.2], [0.4]])), [[7.0], [4.2], [1.0]])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(["classify", "regress"]))
def test_prediction_ranges(seed, head):
    config = ModelConfig(input_size=(24, 24), conv_blocks=((3, 3, 2),), feature_dim=4, head=head,
                         target="TT" if head == "regress" else None)
    model = build_model(config, seed)
    for name in ("head.weight", "fc.weight"):
        model.params[name].data *= 50.0  # push outputs towards saturation
    x = np.random.default_rng(seed).uniform(size=(4, 1, 24, 24))
    p = predict(model, x)
    if head == "classify":
        assert np.all((p > 0) & (p < 1))
    else:
        assert np.all((p >= 1) & (p <= 7))


def test_batch_invariance():
    model = build_model(ModelConfig(), 11)
    x = np.random.default_rng(2).uniform(size=(5, 1, 96, 96))
    whole = predict(model, x)
    single = np.concatenate([predict(model, x[i : i + 1]) for i in range(5)])
    np.testing.assert_allclose(whole, single, rtol=1e-12, atol=0)
    chunks = extract_features(model, x, chunk=2)
    np.testing.assert_allclose(chunks, forward_features(model, x).data, rtol=1e-12, atol=1e-12)
