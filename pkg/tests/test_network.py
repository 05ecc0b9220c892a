import itertools

import numpy as np
import pytest
from scipy.stats import norm

from bqn.distributions import BINARY, GridError, MomentSummary, QuantizationGrid
from bqn.gradcheck import check_objective
from bqn.network import (AvgPool2d, Conv2d, Dense, Flatten, GaussianOutput, MaxPool2d, Network, PropagationError,
                         SoftmaxOutput, UnitPmf, _check, build_network, mlp, validity_checks)
from bqn.trainer import init_params


def small_cnn():
    layers = [Conv2d(1, 2, 3, padding=1), MaxPool2d(2), Conv2d(2, 2, 3, padding=1), AvgPool2d(2), Flatten(),
              Dense(2, 3, activation=None)]
    return Network((1, 4, 4), layers, SoftmaxOutput(3))


def test_shapes_and_describe_round_trip():
    for net in (small_cnn(), mlp([5, 4, 3]), mlp([5, 4, 2], head="gaussian", target_mean=1.0, target_std=2.0),
                mlp([3, 2, 2], grid=QuantizationGrid(np.array([-2.0, 0.0, 2.0])), bias_input=1.5)):
        desc = net.describe()
        again = build_network(desc)
        assert again.describe() == desc
        assert again.shapes == net.shapes
    assert small_cnn().shapes[-1] == (3,)


def test_rebuilt_network_gives_same_bound():
    net = small_cnn()
    params = init_params(net, 0).params
    x = np.random.default_rng(0).random((3, 1, 4, 4))
    y = np.array([0, 1, 2])
    a, _ = net.bound(params, x, y)
    b, _ = build_network(net.describe()).bound(params, x, y)
    assert np.array_equal(a, b)


def test_point_mass_posterior_matches_deterministic_net():
    # with every weight a point mass and +-1 inputs the probabilistic pass is the quantized net,
    # up to the 1e-7 clamp on saturated sign probabilities
    rng = np.random.default_rng(1)
    net = mlp([5, 4, 3])
    params = init_params(net, 0).params
    weights = []
    for p in params["layers"]:
        idx = rng.integers(0, 2, size=p["logits"].shape[:-1])
        p["logits"] = np.where(np.arange(2) == idx[..., None], 0.0, -1e4)
        weights.append(BINARY.values[idx])
    x = rng.choice([-1.0, 1.0], size=(6, 5))
    h, _ = net.propagate(params, x)
    ref = net.deterministic_forward(weights, x)
    assert np.allclose(h.mu, ref, atol=1e-5) and np.allclose(h.nu, 0.0, atol=1e-5)


def test_deterministic_forward_matches_matrix_arithmetic():
    rng = np.random.default_rng(2)
    net = mlp([4, 3, 2])
    W1 = rng.choice([-1.0, 1.0], size=(3, 4))
    W2 = rng.choice([-1.0, 1.0], size=(2, 3))
    x = rng.normal(size=(5, 4))
    h1 = np.where(x @ W1.T >= 0, 1.0, -1.0)
    assert np.array_equal(net.deterministic_forward([W1, W2], x), h1 @ W2.T)
    # sign(0) maps to +1
    zero = net.deterministic_forward([np.ones((3, 4)), W2], np.zeros((1, 4)))
    assert np.array_equal(zero, np.ones((1, 3)) @ W2.T)


def test_bias_input_is_a_constant_unit():
    net = mlp([2, 2], head="gaussian", bias_input=3.0)
    W = np.array([[1.0, -1.0, 1.0], [-1.0, -1.0, -1.0]])
    x = np.array([[0.5, 2.0]])
    got = net.deterministic_forward([W], x)
    pre = np.hstack([x, [[3.0]]]) @ W.T
    assert np.array_equal(got, np.where(pre >= 0, 1.0, -1.0))


def test_sign_layer_matches_enumeration():
    rng = np.random.default_rng(3)
    net = Network((3,), [Dense(3, 1)], GaussianOutput(1))
    logits = rng.normal(size=(1, 3, 2))
    params = {"layers": [{"logits": logits}], "head": {"w": np.ones(1), "log_s": np.array(0.0)}}
    x = np.array([[1.0, -1.0, 0.5]])
    h, _ = net.propagate(params, x)
    Q = np.exp(logits[0]) / np.exp(logits[0]).sum(-1, keepdims=True)
    mean = var = 0.0
    # the sign layer applies the CLT, so check its Gaussian inputs by enumeration
    for th in itertools.product(range(2), repeat=3):
        p = np.prod(Q[np.arange(3), th])
        s = np.sum(BINARY.values[list(th)] * x[0])
        mean += p * s
        var += p * s * s
    var -= mean**2
    assert h.probs[0, 0, 1] == pytest.approx(norm.cdf(mean / np.sqrt(var)), abs=1e-12)


def test_cnn_gradients_match_finite_differences():
    net = small_cnn()
    params = init_params(net, 0).params
    rng = np.random.default_rng(4)
    x = rng.random((2, 1, 4, 4))
    y = np.array([0, 2])
    assert check_objective(net, params, x, y, lam=1e-3) < 1e-4


def test_gaussian_bias_grid_gradients():
    net = mlp([3, 4, 2], head="gaussian", grid=QuantizationGrid(np.array([-2.0, -1.0, 0.0, 1.0, 2.0])),
              bias_input=2.0)
    params = init_params(net, 1).params
    rng = np.random.default_rng(5)
    assert check_objective(net, params, rng.normal(size=(3, 3)), rng.normal(size=3), lam=1e-3) < 1e-4


def test_validity_checks():
    bad = UnitPmf(np.array([[[0.7, 0.7]]]), BINARY)
    _check(0, bad)  # only finiteness is checked by default
    with validity_checks():
        with pytest.raises(PropagationError) as e:
            _check(4, bad)
        assert e.value.layer_index == 4
        with pytest.raises(PropagationError):
            _check(1, MomentSummary(np.zeros(2), np.array([1.0, -1e-3])))
    with pytest.raises(PropagationError):
        _check(0, MomentSummary(np.array([np.nan]), np.zeros(1)))
    net = small_cnn()
    with validity_checks() as outer:
        with validity_checks() as inner:
            net.propagate(init_params(net, 0).params, np.random.default_rng(0).random((2, 1, 4, 4)))
    assert inner["checked"] == len(net.layers) == outer["checked"]
    assert inner["max_row_dev"] < 1e-12 and inner["min_nu"] >= 0


def test_nan_logits_raise_with_layer_index():
    net = mlp([3, 2, 2])
    params = init_params(net, 0).params
    params["layers"][1]["logits"][0, 0, 0] = np.inf
    with pytest.raises((PropagationError, ValueError)):
        net.propagate(params, np.ones((1, 3)))


def test_head_shape_mismatch():
    net = Network((3,), [Dense(3, 2, activation=None)], SoftmaxOutput(4))
    with pytest.raises(ValueError):
        net.init(np.random.default_rng(0))


def test_avgpool_needs_affine_grid():
    grid = QuantizationGrid(np.array([-1.0, 0.0, 2.0]))
    x = UnitPmf(np.full((1, 1, 2, 2, 3), 1 / 3), grid)
    with pytest.raises(GridError):
        AvgPool2d(2).forward({}, x)
    with pytest.raises(TypeError):
        AvgPool2d(2).forward({}, MomentSummary(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2))))
    m, _ = AvgPool2d(2).forward({}, UnitPmf(np.full((1, 1, 2, 2, 2), 0.5), BINARY))
    assert m.mu.item() == pytest.approx(0.0, abs=1e-14) and m.nu.item() == pytest.approx(0.25, abs=1e-14)


def test_head_width_defaults_to_last_layer():
    desc = small_cnn().describe()
    desc["head"] = {"kind": "softmax"}
    assert build_network(desc).head.n_classes == 3
    desc = mlp([4, 6], head="gaussian").describe()
    desc["head"] = {"kind": "gaussian"}
    assert build_network(desc).head.n_in == 6
