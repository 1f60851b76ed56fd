import math

import numpy as np
import pytest

from crlsc.errors import NumericError, ValidationError
from crlsc.nn import (
    Adam,
    Layer,
    MLPParams,
    cosine_lr,
    encode_forward,
    init_mlp,
    load_params,
    mlp_backward,
    mlp_forward,
    save_params,
)


def loop_forward(params, x):
    out = []
    for row in x:
        h = list(row)
        for layer in params.layers:
            nxt = []
            for j in range(layer.weight.shape[1]):
                acc = layer.bias[j]
                for i, hi in enumerate(h):
                    acc += hi * layer.weight[i, j]
                if layer.activation == "relu":
                    acc = max(acc, 0.0)
                elif layer.activation == "tanh":
                    acc = math.tanh(acc)
                elif layer.activation == "sigmoid":
                    acc = 1 / (1 + math.exp(-acc))
                nxt.append(acc)
            h = nxt
        if params.normalize:
            n = math.sqrt(sum(v * v for v in h))
            h = [v / n for v in h]
        out.append(h)
    return np.array(out)


def test_identity_network():
    params = MLPParams([Layer(np.eye(12), np.zeros(12), "none")])
    x = np.random.default_rng(0).uniform(size=(3, 2, 2, 3))
    out, _ = encode_forward(params, x)
    np.testing.assert_array_equal(out, x.reshape(3, -1))


def test_zero_network():
    params = MLPParams([Layer(np.zeros((4, 3)), np.zeros(3), "none")])
    out, _ = mlp_forward(params, np.ones((2, 4)))
    np.testing.assert_array_equal(out, np.zeros((2, 3)))


@pytest.mark.parametrize("hidden", ["relu", "tanh", "sigmoid"])
def test_forward_against_loop(hidden):
    rng = np.random.default_rng(1)
    params = init_mlp([6, 5, 4], seed=3, hidden_activation=hidden, normalize=True)
    for layer in params.layers:
        layer.bias[:] = rng.normal(size=layer.bias.shape)
    x = rng.normal(size=(4, 6))
    np.testing.assert_allclose(mlp_forward(params, x)[0], loop_forward(params, x), atol=1e-10)


def test_normalized_output_unit_norm():
    params = init_mlp([192, 128, 64], seed=0, normalize=True)
    out, _ = mlp_forward(params, np.random.default_rng(2).uniform(size=(10, 192)))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_bad_chain():
    with pytest.raises(ValidationError):
        MLPParams([Layer(np.zeros((3, 4)), np.zeros(4)), Layer(np.zeros((5, 2)), np.zeros(2))])


def test_non_finite_reports_layer():
    params = MLPParams([Layer(np.eye(2), np.zeros(2), "none"), Layer(np.full((2, 2), 1e308), np.zeros(2), "none")])
    with pytest.raises(NumericError, match="layer 1"):
        mlp_forward(params, np.full((1, 2), 10.0))


@pytest.mark.parametrize("hidden,normalize", [("tanh", True), ("sigmoid", False), ("tanh", False)])
def test_backward_finite_differences(hidden, normalize):
    rng = np.random.default_rng(4)
    worst = 0.0
    for inst in range(20):
        params = init_mlp([5, 4, 3], seed=inst, hidden_activation=hidden, out_activation="tanh", normalize=normalize)
        x = rng.normal(size=(3, 5))
        g = rng.normal(size=(3, 3))
        _, cache = mlp_forward(params, x)
        grads, gx = mlp_backward(params, cache, g)
        h = 1e-5

        def f():
            return float((mlp_forward(params, x)[0] * g).sum())

        for arr, ga in zip(params.arrays() + [x], grads + [gx]):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                fp = f()
                arr[idx] = old - h
                fm = f()
                arr[idx] = old
                num = (fp - fm) / (2 * h)
                worst = max(worst, abs(num - ga[idx]) / max(abs(num) + abs(ga[idx]), 1e-7))
    assert worst < 1e-4


def test_adam_zero_lr_leaves_params():
    params = init_mlp([3, 2], seed=1)
    before = [a.copy() for a in params.arrays()]
    opt = Adam(params)
    for _ in range(5):
        opt.step(params, [np.ones_like(a) for a in params.arrays()], 0.0)
    for a, b in zip(before, params.arrays()):
        np.testing.assert_array_equal(a, b)


def test_adam_minimizes_quadratic():
    params = MLPParams([Layer(np.array([[3.0]]), np.array([-2.0]), "none")])
    opt = Adam(params)
    for _ in range(2000):
        opt.step(params, [2 * a for a in params.arrays()], 0.01)
    assert max(abs(a).max() for a in params.arrays()) < 1e-2


def test_cosine_schedule():
    assert cosine_lr(0.005, 0, 50) == 0.005
    assert cosine_lr(0.005, 25, 50) == pytest.approx(0.0025)
    assert cosine_lr(0.005, 50, 50) == pytest.approx(0.0)
    assert cosine_lr(1.0, 10, 10, floor=0.1) == pytest.approx(0.1)


def test_params_roundtrip(tmp_path):
    params = init_mlp([4, 3, 2], seed=5, normalize=True)
    save_params(params, tmp_path / "enc.bin")
    back = load_params(tmp_path / "enc.bin")
    assert back.normalize
    for a, b in zip(params.arrays(), back.arrays()):
        np.testing.assert_array_equal(a, b)
