"""Analytic output layers: softmax classification bound and Gaussian regression.

Both heads consume only the moments of the layer below them. Scale
parameters are kept positive by storing their logarithm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import MomentSummary, softmax


@dataclass
class SoftmaxHead:
    n_classes: int
    log_s: float = 0.0

    @property
    def s(self) -> float:
        return float(np.exp(self.log_s))


@dataclass
class GaussianHead:
    """``y | h ~ N(w.h, s)``; targets are modeled in standardized units."""

    w: np.ndarray
    log_s: float = 0.0
    target_mean: float = 0.0
    target_std: float = 1.0

    @property
    def s(self) -> float:
        return float(np.exp(self.log_s))


def _check_labels(labels, K):
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"label out of range for {K} classes")
    return labels


def _tilted(mu, nu, s):
    """Exponents ``mu/s + nu/(2 s^2)`` of the bound's log-sum-exp."""
    return mu / s + nu / (2.0 * s * s)


def softmax_bound_arrays(mu, nu, s, labels):
    """Per-example bound ``mu_c/s - log sum_k exp(mu_k/s + nu_k/2s^2)``; arrays are ``[B, K]``."""
    a = _tilted(mu, nu, s)
    amax = a.max(axis=-1, keepdims=True)
    lse = amax[..., 0] + np.log(np.sum(np.exp(a - amax), axis=-1))
    mu_c = np.take_along_axis(mu, labels[..., None], axis=-1)[..., 0]
    return mu_c / s - lse


def softmax_bound_grads_arrays(mu, nu, s, labels):
    """Returns ``(d/dmu, d/dnu, d/ds)`` of the per-example bound."""
    pi = softmax(_tilted(mu, nu, s))
    onehot = np.zeros_like(mu)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    g_mu = -(pi - onehot) / s
    g_nu = -pi / (2.0 * s * s)
    mu_c = np.sum(onehot * mu, axis=-1)
    g_s = -mu_c / s**2 + np.sum(pi * (mu / s**2 + nu / s**3), axis=-1)
    return g_mu, g_nu, g_s


def softmax_bound(head: SoftmaxHead, logits_moments: MomentSummary, label) -> float:
    mu = np.atleast_2d(logits_moments.mu)
    nu = np.atleast_2d(logits_moments.nu)
    if mu.shape[-1] < 2:
        raise ValueError("softmax head needs at least two classes")
    labels = _check_labels(np.atleast_1d(label), mu.shape[-1])
    out = softmax_bound_arrays(mu, nu, head.s, labels)
    return float(out[0]) if np.ndim(label) == 0 else out


def softmax_bound_grads(head: SoftmaxHead, logits_moments: MomentSummary, label):
    mu = np.atleast_2d(logits_moments.mu)
    nu = np.atleast_2d(logits_moments.nu)
    labels = _check_labels(np.atleast_1d(label), mu.shape[-1])
    g_mu, g_nu, g_s = softmax_bound_grads_arrays(mu, nu, head.s, labels)
    if np.ndim(label) == 0:
        return g_mu[0], g_nu[0], float(g_s[0])
    return g_mu, g_nu, g_s


def taylor_predict_arrays(mu, nu, s, order: int = 2):
    """Class probabilities from a Taylor expansion of softmax(h/s) around the mean.

    The second-order term uses the exact diagonal Hessian of the softmax,
    ``P_c = l_c + (l_c / 2s^2) [(1 - 2 l_c) nu_c - l.nu + 2 (l^2).nu]``.
    """
    ell = softmax(mu / s)
    if order == 1:
        return ell
    if order != 2:
        raise ValueError("order must be 1 or 2")
    t = np.sum(ell * nu, axis=-1, keepdims=True)
    u = np.sum(ell**2 * nu, axis=-1, keepdims=True)
    p = ell + ell / (2.0 * s * s) * ((1.0 - 2.0 * ell) * nu - t + 2.0 * u)
    p = np.maximum(p, 0.0)
    return p / p.sum(axis=-1, keepdims=True)


def softmax_predict(head: SoftmaxHead, logits_moments: MomentSummary, order: int = 2) -> np.ndarray:
    return taylor_predict_arrays(np.asarray(logits_moments.mu, dtype=np.float64),
                                 np.asarray(logits_moments.nu, dtype=np.float64), head.s, order)


def gaussian_bound_arrays(w, s, mu, nu, y):
    r = y - mu @ w
    return -(r**2 + nu @ w**2) / (2.0 * s) - 0.5 * np.log(2.0 * np.pi * s)


def gaussian_bound_grads_arrays(w, s, mu, nu, y):
    """Returns ``(d/dmu, d/dnu, d/dw, d/ds)`` per example (w-gradient is ``[B, I]``)."""
    r = y - mu @ w
    g_mu = r[..., None] * w / s
    g_nu = np.broadcast_to(-(w**2) / (2.0 * s), nu.shape).copy()
    g_w = (r[..., None] * mu - w * nu) / s
    g_s = -0.5 / s + (r**2 + nu @ w**2) / (2.0 * s * s)
    return g_mu, g_nu, g_w, g_s


def gaussian_bound(head: GaussianHead, hidden_moments: MomentSummary, target):
    """Expected Gaussian log-likelihood in standardized target units."""
    out = gaussian_bound_arrays(head.w, head.s, np.asarray(hidden_moments.mu), np.asarray(hidden_moments.nu),
                                np.asarray(target, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def gaussian_bound_grads(head: GaussianHead, hidden_moments: MomentSummary, target):
    return gaussian_bound_grads_arrays(head.w, head.s, np.asarray(hidden_moments.mu),
                                       np.asarray(hidden_moments.nu), np.asarray(target, dtype=np.float64))


def gaussian_predict_arrays(w, s, mu, nu, gamma, kappa):
    mean = mu @ w
    var = nu @ w**2 + s
    m3 = (gamma * nu**1.5) @ w**3
    m4_each = kappa * nu**2
    wn = w**2 * nu
    # fourth central moment of a sum of independent terms plus N(0, s) noise
    cross = (np.sum(wn, axis=-1) ** 2 - np.sum(wn**2, axis=-1)) * 3.0
    m4 = m4_each @ w**4 + cross + 6.0 * s * np.sum(wn, axis=-1) + 3.0 * s * s
    return mean, var, m3 / var**1.5, m4 / var**2


def gaussian_predict(head: GaussianHead, hidden_moments: MomentSummary) -> MomentSummary:
    """Predictive mean, variance, skewness and kurtosis in standardized units."""
    hm = hidden_moments
    gamma = np.zeros_like(hm.mu) if hm.gamma is None else hm.gamma
    kappa = np.ones_like(hm.mu) if hm.kappa is None else hm.kappa
    mean, var, skew, kurt = gaussian_predict_arrays(head.w, head.s, np.asarray(hm.mu), np.asarray(hm.nu),
                                                    np.asarray(gamma), np.asarray(kappa))
    return MomentSummary(mean, var, skew, kurt)
