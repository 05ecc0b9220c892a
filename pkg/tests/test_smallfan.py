import itertools

import numpy as np
import pytest

from bqn.distributions import BINARY, CategoricalVector, GridError, QuantizationGrid, WiringError, probabilities
from bqn.smallfan import (ConditionalKernel, contract_backward, contract_forward, contract_probs,
                          deterministic_kernel, identity_kernel, shortcut_add, sign_kernel)


def random_cv(rng, shape, grid):
    return CategoricalVector(rng.normal(size=shape + (grid.size,)), grid)


def enumerate_output(table, factors):
    """Brute-force sum over the joint support of all factors."""
    J = factors[0].shape[0]
    out = np.zeros((J, table.shape[0]))
    for j in range(J):
        for combo in itertools.product(*[range(f.shape[1]) for f in factors]):
            w = np.prod([f[j, c] for f, c in zip(factors, combo)])
            out[j] += w * table[(slice(None),) + combo]
    return out


def test_identity_kernel_preserves_input():
    rng = np.random.default_rng(0)
    g = QuantizationGrid(np.array([-1.0, 0.0, 1.0]))
    x = random_cv(rng, (5, 1), g)
    y = contract_forward(identity_kernel(g), x)
    assert np.allclose(probabilities(y), probabilities(x)[:, 0], atol=1e-14)


def test_sign_kernel_is_identity_on_pm1():
    rng = np.random.default_rng(1)
    x = random_cv(rng, (4, 1), BINARY)
    y = contract_forward(sign_kernel(BINARY), x)
    assert np.allclose(probabilities(y), probabilities(x)[:, 0], atol=1e-14)


def test_add_then_clip_matches_enumeration():
    out_grid = BINARY
    k = deterministic_kernel(lambda a, b: float(np.clip(a + b, -1, 1)) if a + b != 0 else 1.0,
                             [BINARY, BINARY], out_grid)
    x = CategoricalVector(np.zeros((1, 2, 2)))
    y = probabilities(contract_forward(k, x))
    # (-1,-1) -> -1; the other three combinations -> +1
    assert np.allclose(y, [[0.25, 0.75]], atol=1e-15)


@pytest.mark.parametrize("E,D", [(1, 2), (2, 3), (3, 4), (2, 4)])
def test_contraction_equals_enumeration(E, D):
    rng = np.random.default_rng(E * 10 + D)
    g = QuantizationGrid(np.arange(D, dtype=float))
    table = rng.dirichlet(np.ones(D), size=(D,) * E)
    table = np.moveaxis(table, -1, 0)
    kernel = ConditionalKernel(table, g)
    x = random_cv(rng, (3, E), g)
    got = probabilities(contract_forward(kernel, x))
    factors = [probabilities(x)[:, e] for e in range(E)]
    assert np.allclose(got, enumerate_output(table, factors), atol=1e-12)
    assert np.allclose(got.sum(-1), 1.0, atol=1e-12) and np.all(got >= 0)


def test_depthwise_parameterized_kernel():
    # out = h * theta on {-1, 1}: one input and one weight per output unit
    kernel = deterministic_kernel(lambda h, t: h * t, [BINARY, BINARY], BINARY)
    rng = np.random.default_rng(2)
    x = random_cv(rng, (4, 1), BINARY)
    th = random_cv(rng, (4, 1), BINARY)
    got = probabilities(contract_forward(kernel, x, th))
    px, pt = probabilities(x)[:, 0], probabilities(th)[:, 0]
    plus = px[:, 1] * pt[:, 1] + px[:, 0] * pt[:, 0]
    assert np.allclose(got[:, 1], plus, atol=1e-14)


def test_wiring_errors():
    k = identity_kernel(BINARY)
    with pytest.raises(WiringError):
        contract_forward(k, CategoricalVector(np.zeros((2, 2, 2))))
    with pytest.raises(WiringError):
        contract_probs(k.table, [np.ones((2, 3))])
    with pytest.raises(ValueError):
        ConditionalKernel(np.array([[0.5, 0.5], [0.6, 0.5]]), BINARY)


def test_backward_zero_and_identity():
    rng = np.random.default_rng(3)
    x = random_cv(rng, (3, 1), BINARY)
    k = identity_kernel(BINARY)
    g_in, g_par = contract_backward(k, x, None, np.zeros((3, 2)))
    assert np.all(g_in == 0) and g_par is None
    go = rng.normal(size=(3, 2))
    g_in, _ = contract_backward(k, x, None, go)
    assert np.allclose(g_in[:, 0], go, atol=1e-15)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    g = QuantizationGrid(np.arange(3.0))
    table = np.moveaxis(rng.dirichlet(np.ones(3), size=(3, 3)), -1, 0)
    kernel = ConditionalKernel(table, g)
    x = random_cv(rng, (2, 1), g)
    th = random_cv(rng, (2, 1), g)
    w = rng.normal(size=(2, 3))
    g_in, g_par = contract_backward(kernel, x, th, w)
    px, pt = probabilities(x), probabilities(th)

    def f(px, pt):
        return np.sum(w * contract_probs(table, [px[:, 0], pt[:, 0]]))

    h = 1e-5
    for arr, grad in ((px, g_in), (pt, g_par)):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f(px, pt)
            arr[idx] = orig - h
            fm = f(px, pt)
            arr[idx] = orig
            num = (fp - fm) / (2 * h)
            assert abs(grad[idx] - num) <= 1e-5 * max(abs(num), 1e-3)


def test_shortcut_examples():
    a = CategoricalVector.from_probs(np.array([[0.0, 1.0]]))
    b = CategoricalVector.from_probs(np.array([[1.0, 0.0]]))
    s = shortcut_add(a, b)
    assert np.allclose(s.grid.values, [-2, 0, 2])
    assert np.allclose(probabilities(s), [[0, 1, 0]], atol=1e-25)
    u = CategoricalVector(np.zeros((1, 2)))
    assert np.allclose(probabilities(shortcut_add(u, u)), [[0.25, 0.5, 0.25]], atol=1e-15)
    rng = np.random.default_rng(5)
    r = random_cv(rng, (3,), BINARY)
    pm = CategoricalVector.from_probs(np.tile([[1.0, 0.0]], (3, 1)))
    shifted = probabilities(shortcut_add(pm, r))
    assert np.allclose(shifted[:, :2], probabilities(r), atol=1e-14)


def test_shortcut_rejects_incompatible_grids():
    a = CategoricalVector(np.zeros((1, 2)), BINARY)
    b = CategoricalVector(np.zeros((1, 3)), QuantizationGrid(np.array([0.0, 1.0, 2.0])))
    with pytest.raises(GridError):
        shortcut_add(a, b)
    c = CategoricalVector(np.zeros((1, 3)), QuantizationGrid(np.array([0.0, 1.0, 3.0])))
    with pytest.raises(GridError):
        shortcut_add(c, c)
