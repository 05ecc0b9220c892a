import itertools

import numpy as np
import pytest
from scipy.special import softmax

from bqn.inference import (analytic_infer, compress, evaluate, map_weights, mc_predict, member_predict,
                           sample_weights)
from bqn.io import pack_weights, packed_size_bits, unpack_weights
from bqn.network import mlp
from bqn.trainer import TrainConfig, init_params, train


def point_mass_params(net, rng):
    params = init_params(net, 0).params
    weights = []
    for p in params["layers"]:
        idx = rng.integers(0, 2, size=p["logits"].shape[:-1])
        p["logits"] = np.where(np.arange(2) == idx[..., None], 0.0, -1e4)
        weights.append(np.where(idx == 1, 1.0, -1.0))
    return params, weights


def test_point_mass_mc_equals_deterministic():
    rng = np.random.default_rng(0)
    net = mlp([5, 4, 3])
    params, weights = point_mass_params(net, rng)
    x = rng.normal(size=(7, 5))
    det = member_predict(net, params, weights, x)
    assert np.array_equal(mc_predict(net, params, x, S=4, seed=3), det)
    assert all(np.array_equal(a, b) for a, b in zip(map_weights(net, params), weights))


def test_uniform_predictor_nll_is_log_k():
    net = mlp([3, 4])
    params = init_params(net, 0).params
    params["layers"][0]["logits"][:] = 0.0
    x = np.zeros((5, 3))
    y = np.array([0, 1, 2, 3, 0])
    # zero inputs give zero logits for every weight realization
    for mode in ("ai", "mc", "map"):
        r = evaluate(net, params, x, y, mode, S=3)
        assert r.nll_nats == pytest.approx(np.log(4), abs=1e-12)
    assert evaluate(net, params, x, y, "ai").nll_is_upper_bound
    assert not evaluate(net, params, x, y, "mc").nll_is_upper_bound


def test_empty_and_bad_mode():
    net = mlp([3, 2])
    params = init_params(net, 0).params
    with pytest.raises(ValueError):
        evaluate(net, params, np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        evaluate(net, params, np.zeros((2, 3)), np.zeros(2, dtype=int), mode="bogus")
    with pytest.raises(ValueError):
        mc_predict(net, params, np.zeros((2, 3)), S=0)


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    net = mlp([4, 6, 3])
    params = init_params(net, 2).params
    x, y = rng.normal(size=(20, 4)), rng.integers(0, 3, size=20)
    perm = rng.permutation(20)
    for mode in ("ai", "mc", "map"):
        a = evaluate(net, params, x, y, mode, S=4, seed=5)
        b = evaluate(net, params, x[perm], y[perm], mode, S=4, seed=5)
        assert a.nll_nats == pytest.approx(b.nll_nats, rel=1e-12) and a.error_rate == b.error_rate


def test_mc_converges_to_enumerated_predictive():
    rng = np.random.default_rng(2)
    net = mlp([2, 2, 2])
    params = init_params(net, 0).params
    for p in params["layers"]:
        p["logits"] = rng.normal(size=p["logits"].shape)
    x = rng.normal(size=(3, 2))
    s = float(np.exp(params["head"]["log_s"]))
    Q = [softmax(p["logits"], axis=-1) for p in params["layers"]]
    exact = np.zeros((3, 2))
    for bits in itertools.product(range(2), repeat=8):
        b = np.array(bits)
        i1, i2 = b[:4].reshape(2, 2), b[4:].reshape(2, 2)
        prob = np.prod(np.take_along_axis(Q[0], i1[..., None], -1)) * np.prod(
            np.take_along_axis(Q[1], i2[..., None], -1))
        W = [np.where(i1 == 1, 1.0, -1.0), np.where(i2 == 1, 1.0, -1.0)]
        exact += prob * softmax(net.deterministic_forward(W, x) / s, axis=-1)
    mc = mc_predict(net, params, x, S=4000, seed=0)
    assert np.max(np.abs(mc - exact)) < 0.03


def test_sampling_seeds():
    net = mlp([6, 5, 3])
    params = init_params(net, 0).params
    a = compress(net, params, "mc", S=3, seed=10)
    assert all(np.array_equal(u, v) for u, v in zip(a[1], sample_weights(net, params, 11)))
    assert not np.array_equal(a[0][0], a[1][0])
    with pytest.raises(ValueError):
        compress(net, params, "bogus")


def test_map_ties_go_to_lowest_index():
    net = mlp([2, 2])
    params = init_params(net, 0).params
    params["layers"][0]["logits"][:] = 0.0
    assert np.all(map_weights(net, params)[0] == -1.0)


def test_compression_ratio_and_round_trip():
    net = mlp([30, 20, 10])
    params = init_params(net, 0).params
    members = compress(net, params, "map")
    packed = pack_weights(net, members)
    n_weights = 30 * 20 + 20 * 10
    assert packed_size_bits(packed) == n_weights
    assert packed_size_bits(packed) / (64 * n_weights) == pytest.approx(1 / 64)
    back = unpack_weights(net, packed)
    assert all(np.array_equal(a, b) for a, b in zip(back[0], members[0]))


def test_regression_reports_rmse_in_target_units():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(100, 3))
    y = 50.0 + 10.0 * np.sign(x.sum(axis=1))
    net = mlp([3, 8], head="gaussian", target_mean=y.mean(), target_std=y.std())
    st = train(net, TrainConfig(epochs=30, batch_size=20, lr0=0.05), x, y)
    pred = analytic_infer(net, st.params, x)
    assert np.all(pred.nu > 0)
    for mode in ("ai", "mc", "map"):
        r = evaluate(net, st.params, x, y, mode, S=5)
        assert r.error_rate is None and r.rmse < y.std()
        assert np.isfinite(r.nll_nats)


def test_trained_classifier_modes_agree():
    # wide enough fan-in for the Gaussian pre-activation approximation to hold
    rng = np.random.default_rng(4)
    x = rng.normal(size=(400, 30))
    w = rng.choice([-1.0, 1.0], size=30)
    x = x[np.abs(x @ w) > 2]
    y = (x @ w > 0).astype(int)
    net = mlp([30, 32, 2])
    st = train(net, TrainConfig(epochs=30, batch_size=25, lr0=0.05), x, y)
    reps = {m: evaluate(net, st.params, x, y, m, S=20) for m in ("ai", "mc", "map")}
    assert reps["ai"].error_rate < 0.05
    assert abs(reps["ai"].error_rate - reps["mc"].error_rate) < 0.05
    assert reps["ai"].nll_nats >= reps["mc"].nll_nats - 3 * reps["mc"].nll_stderr
