"""Large fan-in linear layers under the central-limit approximation.

Pre-activations ``sum_i theta_ji h_i`` get exact means and variances from
the per-weight and per-input moments; only their Gaussian shape is an
approximation. Fully connected and convolutional layers share the same
code: they differ only in the bilinear map ``apply(W, x)`` and its adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .distributions import (BINARY, CategoricalVector, MomentSummary, QuantizationGrid, WiringError,
                            softmax, softmax_vjp)

EPS_VAR = 1e-12
EPS_P = 1e-7
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DenseMap:
    """``y[b, j] = sum_i W[j, i] x[b, i]``."""

    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out

    @property
    def weight_shape(self) -> tuple:
        return (self.n_out, self.n_in)

    @property
    def fans(self) -> tuple[int, int]:
        return self.n_in, self.n_out

    def out_shape(self, in_shape: tuple) -> tuple:
        if tuple(in_shape) != (self.n_in,):
            raise WiringError(f"dense layer expects {(self.n_in,)} inputs, got {tuple(in_shape)}")
        return (self.n_out,)

    def apply(self, W, x):
        return x @ W.T

    def grad_weight(self, g, x):
        return g.T @ x

    def grad_input(self, W, g):
        return g @ W


class ConvMap:
    """2-D cross-correlation with shared weights ``W[c_out, c_in, kh, kw]``."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0):
        self.c_in, self.c_out, self.k = c_in, c_out, kernel
        self.stride, self.padding = stride, padding

    @property
    def weight_shape(self) -> tuple:
        return (self.c_out, self.c_in, self.k, self.k)

    @property
    def fans(self) -> tuple[int, int]:
        return self.c_in * self.k * self.k, self.c_out * self.k * self.k

    def out_shape(self, in_shape: tuple) -> tuple:
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise WiringError(f"conv layer expects ({self.c_in}, H, W) inputs, got {tuple(in_shape)}")
        H, Wd = in_shape[1:]
        Ho = (H + 2 * self.padding - self.k) // self.stride + 1
        Wo = (Wd + 2 * self.padding - self.k) // self.stride + 1
        if Ho < 1 or Wo < 1:
            raise WiringError("convolution window larger than its input")
        return (self.c_out, Ho, Wo)

    def _patches(self, x):
        p = self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (self.k, self.k), axis=(2, 3))
        return win[:, :, ::self.stride, ::self.stride]

    def apply(self, W, x):
        return np.einsum("bchwij,ocij->bohw", self._patches(x), W, optimize=True)

    def grad_weight(self, g, x):
        return np.einsum("bohw,bchwij->ocij", g, self._patches(x), optimize=True)

    def grad_input(self, W, g, in_shape=None):
        B, _, Ho, Wo = g.shape
        s, p, k = self.stride, self.padding, self.k
        H = (Ho - 1) * s + k if in_shape is None else in_shape[1] + 2 * p
        Wd = (Wo - 1) * s + k if in_shape is None else in_shape[2] + 2 * p
        out = np.zeros((B, self.c_in, H, Wd))
        for i in range(k):
            for j in range(k):
                out[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += np.einsum(
                    "bohw,oc->bchw", g, W[:, :, i, j], optimize=True)
        if p:
            out = out[:, :, p:H - p, p:Wd - p]
        return out


@dataclass
class LinearPosterior:
    """Categorical posterior over the weights of one linear map.

    ``weight_logits`` has shape ``weight_shape + (D,)``. M and V are
    recomputed from the logits whenever asked for.
    """

    weight_logits: np.ndarray
    linear: object
    grid: QuantizationGrid = field(default=BINARY)

    def __post_init__(self):
        expected = tuple(self.linear.weight_shape) + (self.grid.size,)
        if self.weight_logits.shape != expected:
            raise WiringError(f"weight logits have shape {self.weight_logits.shape}, expected {expected}")

    @classmethod
    def dense(cls, weight_logits, grid: QuantizationGrid = BINARY):
        J, I = weight_logits.shape[:2]
        return cls(np.asarray(weight_logits, dtype=np.float64), DenseMap(I, J), grid)

    def probs(self) -> np.ndarray:
        return softmax(self.weight_logits)

    def mean_var(self):
        Q = self.probs()
        q = self.grid.values
        M = Q @ q
        V = np.maximum(Q @ q**2 - M**2, 0.0)
        return M, V


def clt_forward_arrays(linear, M, V, mu, nu):
    mu_t = linear.apply(M, mu)
    nu_t = linear.apply(M**2, nu) + linear.apply(V, mu**2 + nu)
    return mu_t, np.maximum(nu_t, 0.0)


def clt_backward_arrays(linear, M, V, mu, nu, g_mu_t, g_nu_t, in_shape=None):
    """VJPs of :func:`clt_forward_arrays` w.r.t. ``M, V, mu, nu``."""
    gM = linear.grad_weight(g_mu_t, mu) + 2.0 * M * linear.grad_weight(g_nu_t, nu)
    gV = linear.grad_weight(g_nu_t, mu**2 + nu)
    kw = {} if in_shape is None or isinstance(linear, DenseMap) else {"in_shape": in_shape}
    back_V = linear.grad_input(V, g_nu_t, **kw)
    g_mu = linear.grad_input(M, g_mu_t, **kw) + 2.0 * mu * back_V
    g_nu = linear.grad_input(M**2, g_nu_t, **kw) + back_V
    return gM, gV, g_mu, g_nu


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


def clt_forward(layer: LinearPosterior, input: MomentSummary) -> MomentSummary:
    """Mean and variance of the pre-activations (batch axis optional for dense layers)."""
    mu, nu = np.asarray(input.mu, dtype=np.float64), np.asarray(input.nu, dtype=np.float64)
    squeeze = isinstance(layer.linear, DenseMap) and mu.ndim == 1
    if squeeze:
        mu, nu = mu[None], nu[None]
    layer.linear.out_shape(mu.shape[1:])
    M, V = layer.mean_var()
    mu_t, nu_t = clt_forward_arrays(layer.linear, M, V, mu, nu)
    if squeeze:
        mu_t, nu_t = mu_t[0], nu_t[0]
    return MomentSummary(mu_t, nu_t)


def clt_backward(layer: LinearPosterior, input: MomentSummary, grad_mu_tilde, grad_nu_tilde):
    """Returns ``(grad_M, grad_V, grad_mu, grad_nu)``."""
    mu, nu = np.asarray(input.mu, dtype=np.float64), np.asarray(input.nu, dtype=np.float64)
    g1, g2 = np.asarray(grad_mu_tilde, dtype=np.float64), np.asarray(grad_nu_tilde, dtype=np.float64)
    squeeze = isinstance(layer.linear, DenseMap) and mu.ndim == 1
    if squeeze:
        mu, nu, g1, g2 = mu[None], nu[None], g1[None], g2[None]
    M, V = layer.mean_var()
    gM, gV, g_mu, g_nu = clt_backward_arrays(layer.linear, M, V, mu, nu, g1, g2, in_shape=mu.shape[1:])
    if squeeze:
        g_mu, g_nu = g_mu[0], g_nu[0]
    return gM, gV, g_mu, g_nu


def weight_prob_grad(Q: np.ndarray, values: np.ndarray, M: np.ndarray, gM: np.ndarray, gV: np.ndarray):
    """Gradient w.r.t. the weight probabilities ``Q[..., d]`` given grads w.r.t. M and V.

    ``V = sum_d Q(d) (q_d - M)^2`` and the dependence through M vanishes, so
    ``dL/dQ(d) = q_d dL/dM + (q_d - M)^2 dL/dV``.
    """
    return values * gM[..., None] + (values - M[..., None]) ** 2 * gV[..., None]


def logits_gradient(layer: LinearPosterior, grad_M, grad_V) -> np.ndarray:
    Q = layer.probs()
    M = Q @ layer.grid.values
    gQ = weight_prob_grad(Q, layer.grid.values, M, np.asarray(grad_M), np.asarray(grad_V))
    return softmax_vjp(Q, gQ)


def sign_probability(mu_t: np.ndarray, nu_t: np.ndarray) -> np.ndarray:
    """``P(sign(pre) = +1)``; units with variance under EPS_VAR are deterministic."""
    mu_t = np.asarray(mu_t, dtype=np.float64)
    nu_t = np.asarray(nu_t, dtype=np.float64)
    p = ndtr(mu_t / np.sqrt(nu_t + EPS_VAR))
    det = nu_t <= EPS_VAR
    if np.any(det):
        p = np.where(det, np.where(mu_t >= 0, 1.0 - EPS_P, EPS_P), p)
    return p


def sign_activation(pre: MomentSummary) -> CategoricalVector:
    p = sign_probability(pre.mu, pre.nu)
    return CategoricalVector.from_probs(np.stack([1.0 - p, p], axis=-1), BINARY)


def sign_backward(pre: MomentSummary, grad_p):
    """Chain ``dL/dp`` (p = probability of +1) to ``(dL/dmu_tilde, dL/dnu_tilde)``."""
    mu_t = np.asarray(pre.mu, dtype=np.float64)
    nu_t = np.asarray(pre.nu, dtype=np.float64)
    grad_p = np.asarray(grad_p, dtype=np.float64)
    s = np.sqrt(nu_t + EPS_VAR)
    z = mu_t / s
    dens = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    live = nu_t > EPS_VAR
    dp_dmu = np.where(live, dens / s, 0.0)
    dp_dnu = np.where(live, -0.5 * mu_t * dens / s**3, 0.0)
    return grad_p * dp_dmu, grad_p * dp_dnu
