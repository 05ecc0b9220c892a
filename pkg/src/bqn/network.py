"""Sequential Bayesian quantized networks.

Between layers a batch of hidden units is carried either as Gaussian
moments (:class:`~bqn.distributions.MomentSummary`) or as categorical
marginals (:class:`UnitPmf`). Every layer provides

* ``forward(params, x) -> (out, cache)`` for probabilistic propagation,
* ``backward(params, cache, g_out) -> (g_in, g_params)`` (plain VJPs),
* ``deterministic(weights, x)`` for the ordinary quantized forward pass.

Gradients w.r.t. a ``MomentSummary`` are ``(g_mu, g_nu)`` tuples and
gradients w.r.t. a ``UnitPmf`` are arrays shaped like its ``probs``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import clt, fft
from .distributions import (BINARY, MomentSummary, QuantizationGrid, GridError, pmf_moments,
                            pmf_moments_vjp, softmax, softmax_vjp)
from .heads import (gaussian_bound_arrays, gaussian_bound_grads_arrays, softmax_bound_arrays,
                    softmax_bound_grads_arrays)


class PropagationError(FloatingPointError):
    def __init__(self, layer_index, message):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


_DEBUG = {"on": False, "row_tol": 1e-6, "stats": None}


@contextlib.contextmanager
def validity_checks(row_tol: float = 1e-6):
    """Assert that every propagated distribution is valid while active.

    Yields a dict counting checked tensors with the worst row-sum deviation
    and the smallest variance seen.
    """
    prev = dict(_DEBUG)
    stats = {"checked": 0, "max_row_dev": 0.0, "min_nu": np.inf}
    _DEBUG.update(on=True, row_tol=row_tol, stats=stats)
    try:
        yield stats
    finally:
        _DEBUG.update(prev)
        if prev["stats"] is not None:
            outer = prev["stats"]
            outer["checked"] += stats["checked"]
            outer["max_row_dev"] = max(outer["max_row_dev"], stats["max_row_dev"])
            outer["min_nu"] = min(outer["min_nu"], stats["min_nu"])


def set_validity_checks(on: bool) -> None:
    _DEBUG["on"] = bool(on)


@dataclass
class UnitPmf:
    """Categorical marginals ``probs[B, *shape, D]`` of hidden units on ``grid``."""

    probs: np.ndarray
    grid: QuantizationGrid

    @property
    def shape(self):
        return self.probs.shape[1:-1]

    def moments(self, higher: bool = False) -> MomentSummary:
        return pmf_moments(self.probs, self.grid.values, higher=higher)


Hidden = Union[MomentSummary, UnitPmf]


def _check(i, h: Hidden):
    if isinstance(h, UnitPmf):
        p = h.probs
        if not np.all(np.isfinite(p)):
            raise PropagationError(i, "non-finite probabilities")
        if _DEBUG["on"]:
            dev = float(np.max(np.abs(p.sum(axis=-1) - 1.0)))
            if np.any(p < 0) or dev > _DEBUG["row_tol"]:
                raise PropagationError(i, "categorical rows are not normalized")
            _record(max_row_dev=dev)
    else:
        if not (np.all(np.isfinite(h.mu)) and np.all(np.isfinite(h.nu))):
            raise PropagationError(i, "non-finite moments")
        if _DEBUG["on"]:
            if np.any(h.nu < 0):
                raise PropagationError(i, "negative variance")
            _record(min_nu=float(np.min(h.nu)))


def _record(max_row_dev=0.0, min_nu=np.inf):
    st = _DEBUG["stats"]
    if st is not None:
        st["checked"] += 1
        st["max_row_dev"] = max(st["max_row_dev"], max_row_dev)
        st["min_nu"] = min(st["min_nu"], min_nu)


def _as_moments(x: Hidden):
    if isinstance(x, UnitPmf):
        return x.moments(), ("pmf", x)
    return x, ("moments", None)


def _moments_grad_to_input(kind, g_mu, g_nu):
    tag, x = kind
    if tag == "moments":
        return (g_mu, g_nu)
    m = x.moments()
    return pmf_moments_vjp(x.probs, x.grid.values, m.mu, g_mu, g_nu)


class Layer:
    params_spec: dict = {}

    def out_shape(self, in_shape):
        return in_shape

    def init(self, rng, in_shape) -> dict:
        return {}

    def forward(self, params, x):
        raise NotImplementedError

    def backward(self, params, cache, g_out):
        raise NotImplementedError

    def deterministic(self, weights, x):
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


def xavier_bound(fan_in: int, fan_out: int) -> float:
    """Uniform Xavier half-width; fans count units, not grid levels."""
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class LinearLayer(Layer):
    """Dense or convolutional layer with categorical weights, CLT propagation.

    ``activation='sign'`` maps pre-activations to Bernoulli units on {-1, 1};
    ``activation=None`` passes the Gaussian pre-activation moments on.
    """

    def __init__(self, linear, activation: Optional[str] = "sign", grid: QuantizationGrid = BINARY,
                 bias_input: Optional[float] = None):
        if activation not in ("sign", None):
            raise ValueError(f"unsupported activation {activation!r}")
        if bias_input is not None and not isinstance(linear, clt.DenseMap):
            raise ValueError("bias inputs are only supported for dense layers")
        self.linear, self.activation, self.grid = linear, activation, grid
        # a bias is a categorical weight on one extra, constant input unit
        self.bias_input = bias_input

    def out_shape(self, in_shape):
        in_shape = tuple(in_shape)
        if self.bias_input is not None:
            in_shape = (in_shape[0] + 1,) if len(in_shape) == 1 else in_shape
        return self.linear.out_shape(in_shape)

    def _augment(self, mu, nu):
        if self.bias_input is None:
            return mu, nu
        B = mu.shape[0]
        return (np.concatenate([mu, np.full((B, 1), float(self.bias_input))], axis=1),
                np.concatenate([nu, np.zeros((B, 1))], axis=1))

    def init(self, rng, in_shape):
        self.out_shape(in_shape)
        a = xavier_bound(*self.linear.fans)
        shape = tuple(self.linear.weight_shape) + (self.grid.size,)
        return {"logits": rng.uniform(-a, a, size=shape)}

    def mean_var(self, params):
        Q = softmax(params["logits"])
        M = Q @ self.grid.values
        V = np.maximum(Q @ self.grid.values**2 - M**2, 0.0)
        return Q, M, V

    def forward(self, params, x):
        m, kind = _as_moments(x)
        Q, M, V = self.mean_var(params)
        mu_in, nu_in = self._augment(m.mu, m.nu)
        mu_t, nu_t = clt.clt_forward_arrays(self.linear, M, V, mu_in, nu_in)
        cache = (kind, m, Q, M, V, mu_t, nu_t)
        if self.activation is None:
            return MomentSummary(mu_t, nu_t), cache
        p = clt.sign_probability(mu_t, nu_t)
        return UnitPmf(np.stack([1.0 - p, p], axis=-1), BINARY), cache

    def backward(self, params, cache, g_out):
        kind, m, Q, M, V, mu_t, nu_t = cache
        if self.activation is None:
            g_mu_t, g_nu_t = g_out
        else:
            g_p = g_out[..., 1] - g_out[..., 0]
            g_mu_t, g_nu_t = clt.sign_backward(MomentSummary(mu_t, nu_t), g_p)
        mu_in, nu_in = self._augment(m.mu, m.nu)
        gM, gV, g_mu, g_nu = clt.clt_backward_arrays(self.linear, M, V, mu_in, nu_in, g_mu_t, g_nu_t,
                                                      in_shape=mu_in.shape[1:])
        if self.bias_input is not None:
            g_mu, g_nu = g_mu[:, :-1], g_nu[:, :-1]
        gQ = clt.weight_prob_grad(Q, self.grid.values, M, gM, gV)
        return _moments_grad_to_input(kind, g_mu, g_nu), {"logits": softmax_vjp(Q, gQ)}

    def deterministic(self, weights, x):
        if self.bias_input is not None:
            x = np.concatenate([x, np.full((x.shape[0], 1), float(self.bias_input))], axis=1)
        pre = self.linear.apply(weights, x)
        if self.activation is None:
            return pre
        # sign(0) is taken as +1
        return np.where(pre >= 0, 1.0, -1.0)

    def describe(self):
        d = {"activation": self.activation, "grid": self.grid.values.tolist()}
        if isinstance(self.linear, clt.DenseMap):
            n_in = self.linear.n_in - (self.bias_input is not None)
            d.update(kind="dense", n_in=n_in, n_out=self.linear.n_out, bias_input=self.bias_input)
        else:
            L = self.linear
            d.update(kind="conv", c_in=L.c_in, c_out=L.c_out, kernel=L.k, stride=L.stride, padding=L.padding)
        return d


def Dense(n_in, n_out, activation="sign", grid=BINARY, bias_input=None):
    """Fully connected layer; ``bias_input=c`` adds a categorical bias acting on a constant input ``c``."""
    return LinearLayer(clt.DenseMap(n_in + (bias_input is not None), n_out), activation, grid, bias_input)


def Conv2d(c_in, c_out, kernel, stride=1, padding=0, activation="sign", grid=BINARY):
    return LinearLayer(clt.ConvMap(c_in, c_out, kernel, stride, padding), activation, grid)


class Flatten(Layer):
    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x):
        if isinstance(x, UnitPmf):
            B, D = x.probs.shape[0], x.probs.shape[-1]
            return UnitPmf(x.probs.reshape(B, -1, D), x.grid), ("pmf", x.probs.shape)
        B = x.mu.shape[0]
        return MomentSummary(x.mu.reshape(B, -1), x.nu.reshape(B, -1)), ("moments", x.mu.shape)

    def backward(self, params, cache, g_out):
        tag, shape = cache
        if tag == "pmf":
            return g_out.reshape(shape), {}
        return (g_out[0].reshape(shape), g_out[1].reshape(shape)), {}

    def deterministic(self, weights, x):
        return x.reshape(x.shape[0], -1)

    def describe(self):
        return {"kind": "flatten"}


def _windows(a, k, trailing):
    """``[B, C, H, W, *t] -> [B, C, H//k, W//k, k*k, *t]`` (non-overlapping, cropped)."""
    B, C, H, W = a.shape[:4]
    Ho, Wo = H // k, W // k
    a = a[:, :, :Ho * k, :Wo * k]
    a = a.reshape((B, C, Ho, k, Wo, k) + trailing)
    nt = len(trailing)
    perm = (0, 1, 2, 4, 3, 5) + tuple(range(6, 6 + nt))
    return a.transpose(perm).reshape((B, C, Ho, Wo, k * k) + trailing)


def _unwindows(w, k, in_shape, trailing):
    B = w.shape[0]
    C, H, W = in_shape
    Ho, Wo = H // k, W // k
    a = w.reshape((B, C, Ho, Wo, k, k) + trailing)
    nt = len(trailing)
    perm = (0, 1, 2, 4, 3, 5) + tuple(range(6, 6 + nt))
    a = a.transpose(perm).reshape((B, C, Ho * k, Wo * k) + trailing)
    out = np.zeros((B, C, H, W) + trailing)
    out[:, :, :Ho * k, :Wo * k] = a
    return out


class AvgPool2d(Layer):
    """Non-overlapping k x k average pooling of categorical units.

    The window sum is computed spectrally on the integer lattice behind the
    grid; the output is the moment summary of the window average.
    """

    def __init__(self, k: int = 2):
        self.k = k

    def out_shape(self, in_shape):
        C, H, W = in_shape
        return (C, H // self.k, W // self.k)

    def forward(self, params, x):
        if not isinstance(x, UnitPmf):
            raise TypeError("average pooling expects categorical units")
        aff = x.grid.affine()
        if aff is None:
            raise GridError("average pooling needs an evenly spaced grid")
        offset, step = aff
        D = x.grid.size
        P = _windows(x.probs, self.k, (D,))
        E = self.k * self.k
        mass, Cs = fft.sum_fft_batched(P)
        values = (E * offset + step * np.arange(mass.shape[-1])) / E
        mu = mass @ values
        nu = np.maximum(mass @ values**2 - mu**2, 0.0)
        return MomentSummary(mu, nu), (Cs, mass, values, mu, x.probs.shape[1:-1], D)

    def backward(self, params, cache, g_out):
        Cs, mass, values, mu, in_shape, D = cache
        g_mu, g_nu = g_out
        g_mass = pmf_moments_vjp(mass, values, mu, g_mu, g_nu)
        gP = fft.sum_fft_batched_backward(Cs, g_mass, D)
        return _unwindows(gP, self.k, in_shape, (D,)), {}

    def deterministic(self, weights, x):
        return _windows(x, self.k, ()).mean(axis=-1)

    def describe(self):
        return {"kind": "avgpool", "k": self.k}


class MaxPool2d(Layer):
    def __init__(self, k: int = 2):
        self.k = k

    def out_shape(self, in_shape):
        C, H, W = in_shape
        return (C, H // self.k, W // self.k)

    def forward(self, params, x):
        if not isinstance(x, UnitPmf):
            raise TypeError("max pooling expects categorical units")
        D = x.grid.size
        P = _windows(x.probs, self.k, (D,))
        return UnitPmf(fft.max_pool_probs(P), x.grid), (P, x.probs.shape[1:-1], D)

    def backward(self, params, cache, g_out):
        P, in_shape, D = cache
        gP = fft.max_pool_probs_backward(P, g_out)
        return _unwindows(gP, self.k, in_shape, (D,)), {}

    def deterministic(self, weights, x):
        return _windows(x, self.k, ()).max(axis=-1)

    def describe(self):
        return {"kind": "maxpool", "k": self.k}


class SoftmaxOutput:
    """Classification head on Gaussian logits with a learned temperature ``s``."""

    kind = "softmax"

    def __init__(self, n_classes: int, init_scale: Optional[float] = None):
        self.n_classes = n_classes
        self.init_scale = init_scale

    def init(self, rng, in_shape, fan_in_hint: int = 1):
        if tuple(in_shape) != (self.n_classes,):
            raise ValueError(f"softmax head expects {self.n_classes} logits, got {tuple(in_shape)}")
        s0 = self.init_scale if self.init_scale is not None else float(fan_in_hint)
        return {"log_s": np.array(np.log(s0))}

    def bound(self, params, h: Hidden, y):
        m, kind = _as_moments(h)
        s = float(np.exp(params["log_s"]))
        val = softmax_bound_arrays(m.mu, m.nu, s, y)
        g_mu, g_nu, g_s = softmax_bound_grads_arrays(m.mu, m.nu, s, y)
        return val, (kind, g_mu, g_nu), {"log_s": np.array(np.sum(g_s) * s)}

    def grad_input(self, cache, weight):
        kind, g_mu, g_nu = cache
        return _moments_grad_to_input(kind, weight * g_mu, weight * g_nu)

    def describe(self):
        return {"kind": "softmax", "n_classes": self.n_classes, "init_scale": self.init_scale}


class GaussianOutput:
    """Regression head ``y ~ N(w.h, s)`` on standardized targets."""

    kind = "gaussian"

    def __init__(self, n_in: int, target_mean: float = 0.0, target_std: float = 1.0):
        self.n_in = n_in
        self.target_mean, self.target_std = float(target_mean), float(target_std)

    def init(self, rng, in_shape, fan_in_hint: int = 1):
        if tuple(in_shape) != (self.n_in,):
            raise ValueError(f"gaussian head expects {self.n_in} inputs, got {tuple(in_shape)}")
        a = xavier_bound(self.n_in, 1)
        return {"w": rng.uniform(-a, a, size=self.n_in), "log_s": np.array(0.0)}

    def standardize(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def bound(self, params, h: Hidden, y):
        m, kind = _as_moments(h)
        s = float(np.exp(params["log_s"]))
        w = params["w"]
        val = gaussian_bound_arrays(w, s, m.mu, m.nu, y)
        g_mu, g_nu, g_w, g_s = gaussian_bound_grads_arrays(w, s, m.mu, m.nu, y)
        return val, (kind, g_mu, g_nu), {"w": g_w.sum(axis=0), "log_s": np.array(np.sum(g_s) * s)}

    def grad_input(self, cache, weight):
        kind, g_mu, g_nu = cache
        return _moments_grad_to_input(kind, weight * g_mu, weight * g_nu)

    def describe(self):
        return {"kind": "gaussian", "n_in": self.n_in, "target_mean": self.target_mean,
                "target_std": self.target_std}


class Network:
    """A chain of layers ending in an analytic head."""

    def __init__(self, input_shape: Sequence[int], layers: Sequence[Layer], head):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.head = head
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(tuple(layer.out_shape(self.shapes[-1])))

    @property
    def weight_layers(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, LinearLayer)]

    def init(self, rng) -> dict:
        layer_params = [l.init(rng, s) for l, s in zip(self.layers, self.shapes)]
        hint = 1
        for l in self.layers:
            if isinstance(l, LinearLayer):
                hint = l.linear.fans[0]
        return {"layers": layer_params, "head": self.head.init(rng, self.shapes[-1], fan_in_hint=hint)}

    def _input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            x = x.reshape((x.shape[0],) + self.input_shape)
        return MomentSummary(x, np.zeros_like(x))

    def propagate(self, params, x):
        """Probabilistic forward pass; returns the head input and per-layer caches."""
        h = self._input(x)
        caches = []
        for i, (layer, p) in enumerate(zip(self.layers, params["layers"])):
            h, cache = layer.forward(p, h)
            _check(i, h)
            caches.append(cache)
        return h, caches

    def backprop(self, params, caches, g_h):
        grads = [None] * len(self.layers)
        g = g_h
        for i in range(len(self.layers) - 1, -1, -1):
            g, grads[i] = self.layers[i].backward(params["layers"][i], caches[i], g)
        return grads

    def bound_and_grads(self, params, x, y, weight: float = 1.0):
        """Per-example bounds and gradients of ``weight * sum(bounds)``."""
        h, caches = self.propagate(params, x)
        val, hcache, g_head = self.head.bound(params["head"], h, y)
        g_h = self.head.grad_input(hcache, weight)
        g_layers = self.backprop(params, caches, g_h)
        g_head = {k: weight * v for k, v in g_head.items()}
        return val, {"layers": g_layers, "head": g_head}, h

    def bound(self, params, x, y):
        h, _ = self.propagate(params, x)
        val, _, _ = self.head.bound(params["head"], h, y)
        return val, h

    def deterministic_forward(self, weights: Sequence[Optional[np.ndarray]], x):
        """Ordinary quantized forward pass for one weight realization.

        ``weights[i]`` holds grid values for layer ``i`` (None for layers without weights).
        Returns the input of the head (logits or last hidden units).
        """
        h = np.asarray(x, dtype=np.float64).reshape((-1,) + self.input_shape)
        for layer, w in zip(self.layers, weights):
            h = layer.deterministic(w, h)
        return h

    def describe(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [l.describe() for l in self.layers],
                "head": self.head.describe()}


def build_network(desc: dict) -> Network:
    """Inverse of :meth:`Network.describe`."""
    layers = []
    for d in desc["layers"]:
        kind = d["kind"]
        grid = QuantizationGrid(np.array(d.get("grid", [-1.0, 1.0])))
        if kind == "dense":
            layers.append(Dense(d["n_in"], d["n_out"], d.get("activation", "sign"), grid, d.get("bias_input")))
        elif kind == "conv":
            layers.append(Conv2d(d["c_in"], d["c_out"], d["kernel"], d.get("stride", 1), d.get("padding", 0),
                                 d.get("activation", "sign"), grid))
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "avgpool":
            layers.append(AvgPool2d(d.get("k", 2)))
        elif kind == "maxpool":
            layers.append(MaxPool2d(d.get("k", 2)))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    h = desc["head"]
    # head widths default to the size of the last layer's output
    shape = tuple(desc["input_shape"])
    for layer in layers:
        shape = tuple(layer.out_shape(shape))
    width = int(np.prod(shape))
    if h["kind"] == "softmax":
        head = SoftmaxOutput(h.get("n_classes", width), h.get("init_scale"))
    elif h["kind"] == "gaussian":
        head = GaussianOutput(h.get("n_in", width), h.get("target_mean", 0.0), h.get("target_std", 1.0))
    else:
        raise ValueError(f"unknown head kind {h['kind']!r}")
    return Network(desc["input_shape"], layers, head)


def mlp(sizes: Sequence[int], head: str = "softmax", grid: QuantizationGrid = BINARY,
        bias_input: Optional[float] = None, **head_kw) -> Network:
    """``sizes = [n_in, hidden..., n_out]``; the last weight layer feeds the head.

    For a softmax head the last layer produces logits (no activation); for a
    Gaussian head all weight layers use sign activations and the head weights
    are continuous.
    """
    layers = []
    n = len(sizes) - 1
    if head not in ("softmax", "gaussian"):
        raise ValueError(f"unknown head {head!r}")
    for i in range(n):
        act = None if head == "softmax" and i == n - 1 else "sign"
        layers.append(Dense(sizes[i], sizes[i + 1], act, grid, bias_input))
    if head == "softmax":
        return Network((sizes[0],), layers, SoftmaxOutput(sizes[-1], **head_kw))
    return Network((sizes[0],), layers, GaussianOutput(sizes[-1], **head_kw))
