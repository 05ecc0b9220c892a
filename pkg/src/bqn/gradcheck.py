"""Central finite-difference check of the full training objective."""

from __future__ import annotations

import numpy as np

from .network import mlp
from .trainer import init_params, objective, tree_leaves

DENOM_FLOOR = 1e-6


def relative_error(a, b, floor: float = DENOM_FLOOR):
    """``|a - b| / max(|a|, |b|, floor)`` elementwise."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_objective(network, params, x, y, lam: float, step: float = 1e-5, n_total=None):
    """Max relative error between analytic and central-difference gradients over all parameters."""
    _, grads, _, _ = objective(network, params, x, y, lam, n_total)
    worst = 0.0
    for p, g in zip(tree_leaves(params), tree_leaves(grads)):
        flat, gflat = p.reshape(-1), np.asarray(g).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = objective(network, params, x, y, lam, n_total)[0]
            flat[k] = orig - step
            fm = objective(network, params, x, y, lam, n_total)[0]
            flat[k] = orig
            num = (fp - fm) / (2 * step)
            worst = max(worst, float(relative_error(gflat[k], num)))
    return worst


def toy_problem(sizes=(6, 4, 3), batch: int = 2, seed: int = 0, head: str = "softmax",
                logit_scale=None):
    """A randomly initialized net, inputs and labels for gradient checks.

    With ``logit_scale`` the Xavier logits are replaced by N(0, scale^2) draws.
    """
    rng = np.random.default_rng(seed)
    net = mlp(list(sizes), head=head)
    state = init_params(net, seed)
    x = rng.normal(size=(batch, sizes[0]))
    if head == "softmax":
        y = rng.integers(0, sizes[-1], size=batch)
    else:
        y = rng.normal(size=batch)
    if logit_scale is not None:
        for p in state.params["layers"]:
            p["logits"] = rng.normal(scale=logit_scale, size=p["logits"].shape)
    return net, state.params, x, y


def run(seed: int = 0, lam: float = 1e-3, step: float = 1e-5) -> dict:
    """Max relative errors for softmax and Gaussian toy nets (6-4-3, batch 2)."""
    out = {}
    for head in ("softmax", "gaussian"):
        net, params, x, y = toy_problem((6, 4, 3), 2, seed, head)
        out[head] = check_objective(net, params, x, y, lam, step)
    return out
