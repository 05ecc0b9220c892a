"""Prediction with a trained posterior and evaluation metrics.

Three modes:

* ``ai``  analytic inference: one probabilistic pass, Taylor / moment head.
  Its NLL is the negated likelihood bound, i.e. an upper bound.
* ``mc``  average of the predictive distributions of S sampled quantized nets.
* ``map`` one quantized net with every weight at its most probable value.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .distributions import MomentSummary, sample_indices, softmax
from .heads import gaussian_predict_arrays, taylor_predict_arrays
from .network import GaussianOutput, LinearLayer, Network, UnitPmf

MODES = ("ai", "mc", "map")
CHUNK = 1000


@dataclass
class EvalReport:
    mode: str
    nll_nats: float
    nll_is_upper_bound: bool
    error_rate: Optional[float]
    rmse: Optional[float]
    n: int
    S: Optional[int] = None
    seed: Optional[int] = None
    nll_stderr: float = 0.0

    def record(self) -> dict:
        return asdict(self)


def _chunks(n, size=CHUNK):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _scale(params) -> float:
    return float(np.exp(params["head"]["log_s"]))


def analytic_infer(network: Network, params, x):
    """Class probabilities ``[B, K]`` or a predictive MomentSummary in target units."""
    x = np.asarray(x, dtype=np.float64)
    s = _scale(params)
    if not isinstance(network.head, GaussianOutput):
        out = []
        for sl in _chunks(len(x)):
            h, _ = network.propagate(params, x[sl])
            out.append(taylor_predict_arrays(h.mu, h.nu, s, order=2))
        return np.concatenate(out)
    parts = []
    for sl in _chunks(len(x)):
        h, _ = network.propagate(params, x[sl])
        hm = h.moments(higher=True) if isinstance(h, UnitPmf) else MomentSummary(
            h.mu, h.nu, np.zeros_like(h.mu), np.full_like(h.mu, 3.0))
        parts.append(gaussian_predict_arrays(params["head"]["w"], s, hm.mu, hm.nu, hm.gamma, hm.kappa))
    mean, var, skew, kurt = (np.concatenate(p) for p in zip(*parts))
    head = network.head
    return MomentSummary(mean * head.target_std + head.target_mean, var * head.target_std**2, skew, kurt)


def map_weights(network: Network, params) -> list:
    """Most probable grid value per weight (ties to the lowest index)."""
    out = []
    for layer, p in zip(network.layers, params["layers"]):
        if isinstance(layer, LinearLayer):
            out.append(layer.grid.values[np.argmax(p["logits"], axis=-1)])
        else:
            out.append(None)
    return out


def sample_weights(network: Network, params, seed) -> list:
    """One joint weight realization drawn from the factorized posterior."""
    rng = np.random.default_rng(seed)
    out = []
    for layer, p in zip(network.layers, params["layers"]):
        if isinstance(layer, LinearLayer):
            out.append(layer.grid.values[sample_indices(softmax(p["logits"]), rng)])
        else:
            out.append(None)
    return out


def deterministic_forward(network: Network, weights: Sequence, x):
    """Head input of an ordinary quantized net (logits, or hidden units for regression)."""
    return network.deterministic_forward(weights, x)


def member_predict(network: Network, params, weights, x):
    """Predictive of one quantized net: class probs, or ``(mean, var)`` in target units."""
    h = np.concatenate([deterministic_forward(network, weights, np.asarray(x)[sl])
                        for sl in _chunks(len(x))])
    s = _scale(params)
    if not isinstance(network.head, GaussianOutput):
        return softmax(h / s)
    head = network.head
    return h @ params["head"]["w"] * head.target_std + head.target_mean, s * head.target_std**2


def compress(network: Network, params, mode: str = "map", S: int = 1, seed: int = 0) -> list:
    """A list of weight realizations: one for ``map``, S for ``mc``."""
    if mode == "map":
        return [map_weights(network, params)]
    if mode == "mc":
        if S < 1:
            raise ValueError("S must be >= 1")
        return [sample_weights(network, params, seed + i) for i in range(S)]
    raise ValueError(f"unknown compression mode {mode!r}")


def ensemble_predict(network: Network, params, members, x):
    """Average of member class probabilities, or member ``(means [S, B], var)`` for regression."""
    preds = [member_predict(network, params, w, x) for w in members]
    if not isinstance(network.head, GaussianOutput):
        return np.mean(preds, axis=0)
    return np.stack([p[0] for p in preds]), preds[0][1]


def mc_predict(network: Network, params, x, S: int = 5, seed: int = 0):
    """Monte-Carlo predictive; sample ``i`` uses seed ``seed + i``."""
    if S < 1:
        raise ValueError("S must be >= 1")
    return ensemble_predict(network, params, compress(network, params, "mc", S, seed), x)


def _class_metrics(probs, y):
    p_true = probs[np.arange(len(y)), y]
    nll = -np.log(np.maximum(p_true, 1e-300))
    err = float(np.mean(np.argmax(probs, axis=-1) != y))
    return nll, err


def _gauss_logpdf(y, mean, var):
    return -0.5 * np.log(2 * np.pi * var) - 0.5 * (y - mean) ** 2 / var


def evaluate(network: Network, params, x, y, mode: str = "ai", S: int = 5, seed: int = 0) -> EvalReport:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    if n == 0 or len(y) != n:
        raise ValueError("evaluation needs a non-empty dataset with one target per input")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    regression = isinstance(network.head, GaussianOutput)
    err = rmse = None
    S_used = S if mode == "mc" else None
    seed_used = seed if mode == "mc" else None
    if mode == "ai":
        bounds = np.concatenate([network.bound(params, x[sl], network.head.standardize(y[sl])
                                               if regression else y[sl])[0] for sl in _chunks(n)])
        nll = -bounds
        pred = analytic_infer(network, params, x)
        if regression:
            nll = nll + np.log(network.head.target_std)
            rmse = float(np.sqrt(np.mean((pred.mu - y) ** 2)))
        else:
            err = float(np.mean(np.argmax(pred, axis=-1) != y))
    else:
        members = compress(network, params, mode, S, seed)
        pred = ensemble_predict(network, params, members, x)
        if regression:
            means, var = pred
            nll = -(logsumexp(_gauss_logpdf(y[None], means, var), axis=0) - np.log(len(members)))
            rmse = float(np.sqrt(np.mean((means.mean(axis=0) - y) ** 2)))
        else:
            nll, err = _class_metrics(pred, y)
    stderr = float(np.std(nll) / np.sqrt(n)) if n > 1 else 0.0
    return EvalReport(mode, float(np.mean(nll)), mode == "ai", err, rmse, n, S_used, seed_used, stderr)
