"""Factorized categorical distributions over a quantization grid.

Parameters are stored as logits (log-space, unnormalized). Every
normalization subtracts the row maximum before exponentiating.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PROB_FLOOR = 1e-30


class InvalidParameterError(ValueError):
    """Raised for non-finite logits or malformed distribution parameters."""


class WiringError(ValueError):
    """Raised when connected components have incompatible shapes."""


class GridError(ValueError):
    """Raised when grids are incompatible for the requested operation."""


@dataclass(frozen=True)
class QuantizationGrid:
    """Ordered set of D distinct real values shared by weights and activations."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size < 2:
            raise GridError("a quantization grid needs at least two values")
        if not np.all(np.diff(v) > 0):
            raise GridError("grid values must be strictly increasing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.size

    def affine(self, rtol: float = 1e-12) -> Optional[tuple[float, float]]:
        """Return ``(offset, step)`` with ``values = offset + step * arange(D)``.

        None when the grid is not evenly spaced (not usable on the FFT path).
        """
        step = self.values[1] - self.values[0]
        expected = self.values[0] + step * np.arange(self.size)
        if np.allclose(self.values, expected, rtol=0.0, atol=rtol * max(1.0, abs(step))):
            return float(self.values[0]), float(step)
        return None

    def index_of(self, x) -> np.ndarray:
        """Grid indices of values lying on the grid (nearest match)."""
        x = np.asarray(x, dtype=np.float64)
        idx = np.abs(x[..., None] - self.values).argmin(axis=-1)
        return idx

    def __eq__(self, other):
        if not isinstance(other, QuantizationGrid):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(np.all(self.values == other.values))

    def __hash__(self):
        return hash(self.values.tobytes())

    def __repr__(self):
        return f"QuantizationGrid({self.values.tolist()})"


BINARY = QuantizationGrid(np.array([-1.0, 1.0]))


@dataclass(frozen=True)
class MomentSummary:
    """Mean/variance (and optionally normalized skewness/kurtosis) per unit."""

    mu: np.ndarray
    nu: np.ndarray
    gamma: Optional[np.ndarray] = None
    kappa: Optional[np.ndarray] = None

    def check(self, atol: float = 0.0) -> None:
        if np.any(self.nu < -atol):
            raise InvalidParameterError("negative variance in moment summary")
        if self.gamma is not None and self.kappa is not None:
            if np.any(self.kappa < 1.0 + self.gamma**2 - 1e-9):
                raise InvalidParameterError("infeasible skewness/kurtosis pair")


@dataclass(frozen=True)
class CategoricalVector:
    """Independent categorical variables over ``grid``; logits have shape ``[..., D]``."""

    logits: np.ndarray
    grid: QuantizationGrid = field(default=BINARY)

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim == 0 or logits.shape[-1] != self.grid.size:
            raise InvalidParameterError(
                f"logits last axis {logits.shape[-1:]} does not match grid size {self.grid.size}")
        object.__setattr__(self, "logits", logits)

    @classmethod
    def from_probs(cls, probs, grid: QuantizationGrid = BINARY) -> "CategoricalVector":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(np.log(np.maximum(probs, PROB_FLOOR)), grid)

    @property
    def probs(self) -> np.ndarray:
        return probabilities(self)

    @property
    def shape(self) -> tuple:
        return self.logits.shape[:-1]


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_vjp(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. probabilities back to the logits (last axis)."""
    return p * (grad_p - np.sum(p * grad_p, axis=-1, keepdims=True))


def probabilities(cv: CategoricalVector) -> np.ndarray:
    if not np.all(np.isfinite(cv.logits)):
        raise InvalidParameterError("non-finite logit")
    return softmax(cv.logits)


def pmf_moments(p: np.ndarray, values: np.ndarray, higher: bool = False) -> MomentSummary:
    """Moments of categorical rows ``p[..., D]`` supported on ``values``."""
    mu = p @ values
    # central form avoids cancellation near point masses
    c = values - mu[..., None]
    nu = np.sum(p * c**2, axis=-1)
    if not higher:
        return MomentSummary(mu, nu)
    m3 = np.sum(p * c**3, axis=-1)
    m4 = np.sum(p * c**4, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(nu > 0, m3 / nu**1.5, 0.0)
        kappa = np.where(nu > 0, m4 / nu**2, 1.0)
    return MomentSummary(mu, nu, gamma, kappa)


def pmf_moments_vjp(p: np.ndarray, values: np.ndarray, mu: np.ndarray,
                    grad_mu: np.ndarray, grad_nu: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``p`` of a scalar depending on (mu, nu) of the rows."""
    return grad_mu[..., None] * values + grad_nu[..., None] * (values**2 - 2.0 * mu[..., None] * values)


def moments(cv: CategoricalVector, higher: bool = False) -> MomentSummary:
    return pmf_moments(probabilities(cv), cv.grid.values, higher=higher)


def row_entropy(p: np.ndarray) -> np.ndarray:
    # 0 ln 0 = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -np.sum(t, axis=-1)


def entropy(cv: CategoricalVector) -> float:
    """Total entropy in nats, summed over all variables."""
    return float(np.sum(row_entropy(probabilities(cv))))


def entropy_grad(logits: np.ndarray) -> np.ndarray:
    """Gradient of the summed row entropies w.r.t. the logits."""
    p = softmax(logits)
    logp = logits - np.max(logits, axis=-1, keepdims=True)
    logp = logp - np.log(np.sum(np.exp(logp), axis=-1, keepdims=True))
    h = -np.sum(p * logp, axis=-1, keepdims=True)
    return -p * (logp + h)


def sample_indices(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one index per row of ``p[..., D]``."""
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1] + (1,))
    idx = np.sum(cdf < u * cdf[..., -1:], axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def sample(cv: CategoricalVector, rng_seed) -> np.ndarray:
    """One joint realization, each variable drawn independently."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return cv.grid.values[sample_indices(probabilities(cv), rng)]


def map_select(cv: CategoricalVector) -> np.ndarray:
    """Most probable grid value per variable; ties go to the lowest index."""
    # argmax on logits equals argmax on probabilities and returns the first maximum
    return cv.grid.values[np.argmax(cv.logits, axis=-1)]
