"""Sums of independent integer-valued variables through their spectra, and pooling.

A PMF on ``{b, ..., B}`` is stored as its lower bound plus a mass vector.
Summation zero-pads every input to the output range ``R = B - b + 1`` and
multiplies the DFTs, so no circular wrap-around can occur.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distributions import CategoricalVector, GridError, MomentSummary, probabilities

SPECTRUM_FLOOR = 1e-8
CLAMP_TOL = 1e-12


class ConsistencyError(RuntimeError):
    """Inverse transform produced mass that is negative beyond round-off."""


@dataclass(frozen=True)
class IntegerPmf:
    lower: int
    mass: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=np.float64)
        if m.ndim != 1 or m.size == 0:
            raise ValueError("mass must be a non-empty vector")
        object.__setattr__(self, "mass", m)
        object.__setattr__(self, "lower", int(self.lower))

    @property
    def upper(self) -> int:
        return self.lower + self.mass.size - 1

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.lower, self.upper + 1)


@dataclass(frozen=True)
class Spectrum:
    coeffs: np.ndarray

    @property
    def resolution(self) -> int:
        return self.coeffs.size


def spectrum(pmf: IntegerPmf, resolution: int) -> Spectrum:
    if resolution < pmf.mass.size:
        raise ValueError("resolution shorter than the PMF support")
    return Spectrum(np.fft.fft(pmf.mass, n=resolution))


def _clamp(mass: np.ndarray) -> np.ndarray:
    if np.any(mass < -CLAMP_TOL):
        raise ConsistencyError(f"inverse transform gave mass {mass.min():.3e}")
    mass = np.where(mass < 0, 0.0, mass)
    return mass / mass.sum(axis=-1, keepdims=True)


def sum_via_fft(inputs: Sequence[IntegerPmf]) -> IntegerPmf:
    """PMF of the sum of independent inputs (product of their spectra)."""
    if len(inputs) == 0:
        raise ValueError("need at least one input PMF")
    if len(inputs) == 1:
        return inputs[0]
    b = sum(p.lower for p in inputs)
    B = sum(p.upper for p in inputs)
    R = B - b + 1
    C = np.ones(R, dtype=np.complex128)
    for p in inputs:
        C = C * np.fft.fft(p.mass, n=R)
    return IntegerPmf(b, _clamp(np.fft.ifft(C).real))


def _leave_one_out(C: np.ndarray) -> np.ndarray:
    """``out[..., i, :] = prod_{k != i} C[..., k, :]`` without division."""
    E = C.shape[-2]
    ones = np.ones_like(C[..., :1, :])
    prefix = np.cumprod(np.concatenate([ones, C[..., :-1, :]], axis=-2), axis=-2)
    suffix = np.cumprod(np.concatenate([ones, C[..., :0:-1, :]], axis=-2), axis=-2)[..., ::-1, :]
    assert prefix.shape[-2] == E
    return prefix * suffix


def sum_backward_fft(inputs: Sequence[IntegerPmf], grad_out) -> list[np.ndarray]:
    """Gradient w.r.t. each input mass vector, given ``grad_out`` w.r.t. the sum's mass.

    The adjoint of a convolution is a correlation, so the leave-one-out
    spectrum ``C / C_i`` enters conjugated. Where ``|C_i(f)|`` is tiny the
    division is replaced by the exact product of the remaining spectra.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if len(inputs) == 1:
        return [grad_out.copy()]
    b = sum(p.lower for p in inputs)
    B = sum(p.upper for p in inputs)
    R = B - b + 1
    if grad_out.shape != (R,):
        raise ValueError(f"grad_out must have length {R}")
    Cs = np.stack([np.fft.fft(p.mass, n=R) for p in inputs])
    C = np.prod(Cs, axis=0)
    G = np.fft.fft(grad_out)
    grads = []
    loo_exact = None
    for i, p in enumerate(inputs):
        if np.min(np.abs(Cs[i])) < SPECTRUM_FLOOR:
            if loo_exact is None:
                loo_exact = _leave_one_out(Cs)
            loo = loo_exact[i]
        else:
            loo = C / Cs[i]
        g = np.fft.ifft(G * np.conj(loo)).real
        grads.append(g[:p.mass.size])
    return grads


def sum_fft_batched(P: np.ndarray):
    """Sum E same-length PMFs per leading index: ``P[..., E, L] -> (mass[..., R], spectra)``."""
    E, L = P.shape[-2:]
    R = E * (L - 1) + 1
    Cs = np.fft.fft(P, n=R, axis=-1)
    C = np.prod(Cs, axis=-2)
    mass = np.fft.ifft(C, axis=-1).real
    return _clamp(mass), Cs


def sum_fft_batched_backward(Cs: np.ndarray, grad_out: np.ndarray, L: int) -> np.ndarray:
    """Adjoint of :func:`sum_fft_batched`, leave-one-out spectra computed exactly."""
    loo = _leave_one_out(Cs)
    G = np.fft.fft(grad_out, axis=-1)[..., None, :]
    return np.fft.ifft(G * np.conj(loo), axis=-1).real[..., :L]


def _common_grid(inputs: Sequence[CategoricalVector]):
    grid = inputs[0].grid
    for cv in inputs[1:]:
        if cv.grid != grid:
            raise GridError("pooled inputs must share one grid")
    return grid


def max_pool_probs(P: np.ndarray) -> np.ndarray:
    """``P[..., I, D] -> [..., D]``: CDF of the max is the product of input CDFs."""
    F = np.prod(np.cumsum(P, axis=-1), axis=-2)
    out = np.diff(F, axis=-1, prepend=0.0)
    return np.maximum(out, 0.0)


def max_pool_probs_backward(P: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Product rule over the CDFs; returns the gradient w.r.t. ``P[..., I, D]``."""
    F = np.cumsum(P, axis=-1)
    # pmf_out[d] = Fmax[d] - Fmax[d-1]  =>  dL/dFmax[d] = g[d] - g[d+1]
    gF = grad_out - np.concatenate([grad_out[..., 1:], np.zeros_like(grad_out[..., :1])], axis=-1)
    gFi = gF[..., None, :] * _leave_one_out(F)
    # F_i[d] = sum_{d' <= d} P_i[d']  =>  dL/dP_i[d'] = sum_{d >= d'} dL/dF_i[d]
    return np.cumsum(gFi[..., ::-1], axis=-1)[..., ::-1]


def max_pool(inputs: Sequence[CategoricalVector]) -> CategoricalVector:
    grid = _common_grid(inputs)
    P = np.stack([probabilities(cv) for cv in inputs], axis=-2)
    return CategoricalVector.from_probs(max_pool_probs(P), grid)


def prob_pool(inputs: Sequence[CategoricalVector], weights) -> CategoricalVector:
    """Mixture of the inputs with fixed selection probabilities ``weights``."""
    grid = _common_grid(inputs)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(inputs),) or np.any(w < -1e-8) or abs(w.sum() - 1.0) > 1e-8:
        raise ValueError("pooling weights must lie on the probability simplex")
    P = np.stack([probabilities(cv) for cv in inputs], axis=-2)
    return CategoricalVector.from_probs(np.einsum("i,...id->...d", w, P), grid)


def avg_pool(inputs: Sequence[IntegerPmf], window_size: int, offset: float = 0.0,
             step: float = 1.0) -> MomentSummary:
    """Moments of the window average.

    Inputs are in integer coordinates ``u``; the real value of each input is
    ``offset + step * u``. The sum is computed spectrally, then its support
    is mapped to real values and divided by ``window_size``.
    """
    total = sum_via_fft(inputs)
    values = (len(inputs) * offset + step * total.support) / window_size
    mu = float(total.mass @ values)
    nu = max(float(total.mass @ values**2) - mu**2, 0.0)
    return MomentSummary(np.array(mu), np.array(nu))
