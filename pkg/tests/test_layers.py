import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidp.autodiff import ShapeError, Tape, Tensor, mean, softmax_cross_entropy
from sidp.layers import (Dense, ReLU, Sequential, batch_norm, build_model,
                         conv2d, flatten_params, layer_norm, lenet5, max_pool2d, mlp, param_mask,
                         scale_invariance_check, scale_layers, scaled_layer_indices,
                         unflatten_params)


def test_layer_norm_hand_example():
    out = layer_norm(np.array([[1.0, 2.0, 3.0]]), np.ones(3), np.zeros(3), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.224744871, 0.0, 1.224744871]], atol=1e-6)


def test_layer_norm_constant_row_gives_beta():
    beta = np.array([0.5, -1.0, 2.0])
    out = layer_norm(np.full((2, 3), 7.0), np.ones(3), beta)
    np.testing.assert_allclose(out.data, np.tile(beta, (2, 1)), atol=1e-12)


def test_layer_norm_zero_gamma_gives_beta(rng):
    beta = rng.normal(size=4)
    out = layer_norm(rng.normal(size=(3, 4)), np.zeros(4), beta)
    np.testing.assert_allclose(out.data, np.tile(beta, (3, 1)), atol=0)


def test_layer_norm_needs_two_units():
    with pytest.raises(ValueError):
        layer_norm(np.ones((2, 1)), np.ones(1), np.zeros(1))


def test_batch_norm_hand_example():
    out = batch_norm(np.array([[1.0], [3.0]]), np.ones(1), np.zeros(1), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0], [1.0]], atol=1e-9)


def test_batch_norm_copies_of_one_sample_give_beta(rng):
    x = np.tile(rng.normal(size=(1, 5)), (4, 1))
    beta = rng.normal(size=5)
    np.testing.assert_allclose(batch_norm(x, np.ones(5), beta).data, np.tile(beta, (4, 1)),
                               atol=1e-12)


def test_batch_norm_affine_law(rng):
    x = rng.normal(size=(64, 3))
    x = (x - x.mean(0)) / x.std(0)
    out = batch_norm(x, np.full(3, 2.0), np.full(3, 5.0), eps=1e-12)
    np.testing.assert_allclose(out.data, 2 * x + 5, atol=1e-8)


def test_batch_norm_needs_two_rows():
    with pytest.raises(ValueError):
        batch_norm(np.ones((1, 3)), np.ones(3), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 10_000),
       st.floats(0.1, 3.0), st.floats(-2, 2), st.sampled_from(["layer", "batch"]))
def test_norm_output_moments(b, c, seed, gamma, beta, kind):
    z = np.random.default_rng(seed).normal(scale=3.0, size=(b, c))
    eps = 1e-5
    fn = layer_norm if kind == "layer" else batch_norm
    out = fn(z, np.full(c, gamma), np.full(c, beta), eps=eps).data
    axis = 1 if kind == "layer" else 0
    var = z.var(axis=axis)
    np.testing.assert_allclose(out.mean(axis=axis), beta, atol=1e-6)
    np.testing.assert_allclose(out.std(axis=axis), gamma * np.sqrt(var / (var + eps)), atol=1e-4)


def _conv_reference(x, w, b):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    out = np.zeros((n, o, h - k + 1, wd - k + 1))
    for i in range(n):
        for j in range(o):
            for r in range(h - k + 1):
                for s in range(wd - k + 1):
                    out[i, j, r, s] = np.sum(x[i, :, r:r + k, s:s + k] * w[j]) + b[j]
    return out


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 5, 5))
    np.testing.assert_array_equal(conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1)).data, x)


def test_conv_all_ones_counts():
    out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1)).data
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 4.0))


def test_conv_matches_loop_reference(rng):
    x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    np.testing.assert_allclose(conv2d(x, w, b).data, _conv_reference(x, w, b), atol=1e-12)


def test_conv_same_padding_keeps_size(rng):
    out = conv2d(rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 5, 5)), np.zeros(3),
                 padding="same")
    assert out.shape == (1, 3, 6, 6)


def test_conv_channel_mismatch_is_shape_error(rng):
    with pytest.raises(ShapeError):
        conv2d(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 2, 2)), np.zeros(1))


def test_max_pool():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(max_pool2d(x, 2).data, [[[[5, 7], [13, 15]]]])


def _fd_check(model, params, x, y, h=1e-6):
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with Tape() as tape:
        loss = mean(softmax_cross_entropy(model(leaves, x), y))
    g = tape.backward(loss, list(leaves.values()))
    analytic = flatten_params(model, {k: g[t] for k, t in leaves.items()})
    vec = flatten_params(model, params)
    numeric = np.zeros_like(vec)
    for i in range(vec.size):
        for sgn in (1, -1):
            v = vec.copy()
            v[i] += sgn * h
            p = unflatten_params(model, v)
            numeric[i] += sgn * mean(softmax_cross_entropy(model(p, x), y)).item()
        numeric[i] /= 2 * h
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)


@pytest.mark.parametrize("norm", [None, "layer", "batch"])
def test_conv_net_gradients_match_finite_differences(norm, rng):
    from sidp.layers import Conv2d, Flatten, MaxPool2d, _norm_layer
    layers = [Conv2d(1, 2, 3, padding="same"), *_norm_layer(norm, 2, 1e-5), ReLU(), MaxPool2d(2),
              Flatten(), Dense(2 * 3 * 3, 3)]
    model = Sequential(layers, (1, 6, 6))
    params = model.init_params(rng)
    x, y = rng.uniform(size=(4, 1, 6, 6)), np.array([0, 1, 2, 1])
    assert _fd_check(model, params, x, y) < 1e-6


@pytest.mark.parametrize("norm", [None, "layer", "batch"])
def test_mlp_gradients_match_finite_differences(norm, rng):
    model = mlp(5, (4, 3), 3, norm=norm, norm_output=norm is not None)
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in model.init_params(rng).items()}
    x, y = rng.normal(size=(5, 5)), np.array([0, 1, 2, 0, 1])
    assert _fd_check(model, params, x, y) < 1e-6


def test_model_names_and_param_layout():
    m = mlp(norm="layer")
    assert m.name == "LN-MLP-300-100"
    assert m.num_params == 784 * 300 + 300 + 300 * 100 + 100 + 100 * 10 + 10 + 2 * (300 + 100)
    assert lenet5("batch").name == "BN-LeNet-5"
    assert build_model("mlp", None).name == "MLP-300-100"
    with pytest.raises(ValueError):
        build_model("resnet")


def test_flatten_roundtrip_and_mask(rng):
    m = mlp(6, (4,), 3, norm="layer")
    p = m.init_params(rng)
    back = unflatten_params(m, flatten_params(m, p))
    for k in p:
        np.testing.assert_array_equal(back[k], p[k])
    mask = param_mask(m, ("weight", "bias"))
    assert mask.sum() == 6 * 4 + 4 + 4 * 3 + 3
    with pytest.raises(ShapeError):
        unflatten_params(m, np.zeros(3))


def test_lenet_forward_shape(rng):
    m = lenet5("layer")
    out = m(m.init_params(rng), rng.uniform(size=(2, 28, 28)))
    assert out.shape == (2, 10)


def test_scaled_layers_are_the_ones_before_norms():
    assert scaled_layer_indices(mlp(8, (4, 3), 2, norm="layer")) == [0, 3]
    assert scaled_layer_indices(mlp(8, (4, 3), 2, norm="layer", norm_output=True)) == [0, 3, 6]
    assert scaled_layer_indices(mlp(8, (4, 3), 2)) == [0, 2]


def test_scale_identity_gives_zero_deviation(rng):
    m = mlp(8, (6, 5), 3, norm="layer")
    assert scale_invariance_check(m, m.init_params(rng), 1.0, rng.normal(size=(4, 8))) == 0.0


@pytest.mark.parametrize("norm", ["layer", "batch"])
def test_normalized_mlp_is_scale_invariant(norm, rng):
    m = mlp(20, (16, 12), 4, norm=norm, eps=1e-10)
    p = m.init_params(rng)
    x = rng.normal(size=(8, 20))
    for lam in (0.5, 2.0, 10.0):
        assert scale_invariance_check(m, p, lam, x) <= 1e-6


def test_norm_eps_breaks_invariance_only_slightly(rng):
    # with eps > 0 the normalizer sees lam^2 var + eps, so the error is O(eps / var)
    m = mlp(20, (16, 12), 4, norm="layer", eps=1e-5)
    p = m.init_params(rng)
    dev = scale_invariance_check(m, p, 0.5, rng.normal(size=(8, 20)))
    assert 0 < dev < 1e-3


def test_plain_mlp_output_scales_with_depth(rng):
    m = mlp(20, (16, 12), 4)
    p = m.init_params(rng)
    x = rng.normal(size=(8, 20))
    base = m(p, x).data
    scaled = m(scale_layers(m, p, 10.0), x).data
    # two scaled ReLU layers with scaled biases: the hidden output grows by 100
    np.testing.assert_allclose(scaled - p["4.bias"], 100 * (base - p["4.bias"]), rtol=1e-10)


def test_scale_rejects_nonpositive_lambda(rng):
    m = mlp(4, (3,), 2, norm="layer")
    with pytest.raises(ValueError):
        scale_invariance_check(m, m.init_params(rng), 0.0, np.ones((2, 4)))
