"""Variational training of a :class:`~bqn.network.Network`.

The objective for one minibatch is ``(N/|B|) sum_n L_n + lam * H(Q)``: the
per-example likelihood bounds rescaled to the full training set plus the
weight entropy (the regularizer under a uniform prior, up to a constant).
It is maximized with ADAM; the update is written as descent on the negated
objective, which is the same thing.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .distributions import entropy_grad, row_entropy, softmax
from .network import GaussianOutput, Network

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    lam: float = 1e-3
    batch_size: int = 100
    epochs: int = 10
    lr0: float = 1e-2
    lr_decay: float = 0.98
    seed: int = 0
    shift_pixels: int = 0
    hflip: bool = False
    image_shape: Optional[tuple] = None
    clip_norm: Optional[float] = 10.0
    freeze_scale: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lam must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.shift_pixels < 0:
            raise ValueError("shift_pixels must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive or None")


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    seed: int = 0


def tree_map(fn, *trees):
    t0 = trees[0]
    if isinstance(t0, dict):
        return {k: tree_map(fn, *(t[k] for t in trees)) for k in t0}
    if isinstance(t0, list):
        return [tree_map(fn, *(t[i] for t in trees)) for i in range(len(t0))]
    return fn(*trees)


def tree_leaves(tree) -> list:
    if isinstance(tree, dict):
        return [x for k in tree for x in tree_leaves(tree[k])]
    if isinstance(tree, list):
        return [x for t in tree for x in tree_leaves(t)]
    return [tree]


def init_params(network: Network, seed: int) -> TrainState:
    """Xavier-uniform logits and zeroed ADAM accumulators."""
    params = network.init(np.random.default_rng(seed))
    zeros = tree_map(np.zeros_like, params)
    return TrainState(params, zeros, tree_map(np.zeros_like, params), 0, 0, seed)


def weight_entropy(network: Network, params) -> float:
    total = 0.0
    for i in network.weight_layers:
        total += float(np.sum(row_entropy(softmax(params["layers"][i]["logits"]))))
    return total


def objective(network: Network, params, x, y, lam: float, n_total: Optional[int] = None):
    """Value and gradient of the minibatch objective.

    Returns ``(value, grads, bounds, head_input)`` where ``bounds`` are the
    per-example likelihood bounds and ``grads`` mirrors ``params``.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    B = len(x)
    scale = (n_total if n_total is not None else B) / B
    if isinstance(network.head, GaussianOutput):
        y = network.head.standardize(y)
    bounds, grads, h = network.bound_and_grads(params, x, y, weight=scale)
    value = scale * float(np.sum(bounds))
    if not np.isfinite(value):
        raise FloatingPointError("objective is not finite")
    if lam > 0:
        value += lam * weight_entropy(network, params)
        for i in network.weight_layers:
            grads["layers"][i]["logits"] = grads["layers"][i]["logits"] + lam * entropy_grad(
                params["layers"][i]["logits"])
    return value, grads, bounds, h


def global_norm(grads) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in tree_leaves(grads))))


def adam_step(state: TrainState, grads, lr: float) -> TrainState:
    """One bias-corrected ADAM ascent step on the objective."""
    t = state.step + 1
    neg = tree_map(lambda g: -g, grads)  # descend on -objective
    m = tree_map(lambda m, g: BETA1 * m + (1 - BETA1) * g, state.m, neg)
    v = tree_map(lambda v, g: BETA2 * v + (1 - BETA2) * g * g, state.v, neg)
    c1, c2 = 1 - BETA1**t, 1 - BETA2**t
    params = tree_map(lambda p, m, v: p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS), state.params, m, v)
    return TrainState(params, m, v, t, state.epoch, state.seed)


def augment(images, config: TrainConfig, rng: np.random.Generator):
    """Random integer shifts within ``shift_pixels`` (zero fill) and optional horizontal flips.

    ``images`` is ``[B, ..., H, W]``; each image gets its own shift.
    """
    x = np.asarray(images, dtype=np.float64)
    k = config.shift_pixels
    if k == 0 and not config.hflip:
        return x
    out = np.zeros_like(x)
    H, W = x.shape[-2:]
    for b in range(x.shape[0]):
        img = x[b]
        if config.hflip and rng.random() < 0.5:
            img = img[..., ::-1]
        dy, dx = (rng.integers(-k, k + 1, size=2) if k else (0, 0))
        out[b] = shift_image(img, int(dy), int(dx))
    return out


def shift_image(img, dy: int, dx: int):
    """Translate by ``dy`` rows and ``dx`` columns; vacated pixels become 0."""
    H, W = img.shape[-2:]
    out = np.zeros_like(img)
    ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
    xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
    out[..., yd, xd] = img[..., ys, xs]
    return out


def _augment_batch(network: Network, xb, config: TrainConfig, rng):
    if config.shift_pixels == 0 and not config.hflip:
        return xb
    shape = config.image_shape or network.input_shape
    if len(shape) < 2:
        raise ValueError("augmentation needs an image shape")
    n = xb.shape[0]
    return augment(xb.reshape((n,) + tuple(shape)), config, rng).reshape(xb.shape)


def _zero_head_scale(grads):
    if "log_s" in grads["head"]:
        grads["head"]["log_s"] = np.zeros_like(grads["head"]["log_s"])
    return grads


def train(network: Network, config: TrainConfig, x, y, state: Optional[TrainState] = None,
          metrics: Optional[Callable[[dict], None]] = None,
          on_epoch: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Minibatch ADAM on the objective; ``lr = lr0 * lr_decay ** epoch``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    N = len(x)
    if N == 0:
        raise ValueError("empty training set")
    if state is None:
        state = init_params(network, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    classify = not isinstance(network.head, GaussianOutput)
    for _ in range(config.epochs):
        lr = config.lr0 * config.lr_decay**state.epoch
        order = rng.permutation(N)
        tot_obj, tot_bound, n_wrong, sq_err = 0.0, 0.0, 0, 0.0
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = _augment_batch(network, x[idx], config, rng)
            value, grads, bounds, h = objective(network, state.params, xb, y[idx], config.lam, N)
            if config.freeze_scale:
                grads = _zero_head_scale(grads)
            if config.clip_norm is not None:
                norm = global_norm(grads) / N
                if norm > config.clip_norm:
                    grads = tree_map(lambda g: g * (config.clip_norm / norm), grads)
            state = adam_step(state, grads, lr)
            tot_obj += value * len(idx) / N
            tot_bound += float(np.sum(bounds))
            if classify:
                n_wrong += int(np.sum(np.argmax(h.mu, axis=-1) != y[idx]))
            else:
                pred = h.moments().mu @ state.params["head"]["w"] if hasattr(h, "probs") else h.mu @ state.params["head"]["w"]
                sq_err += float(np.sum((pred - network.head.standardize(y[idx])) ** 2))
        state = TrainState(state.params, state.m, state.v, state.step, state.epoch + 1, state.seed)
        if metrics is not None:
            rec = {"epoch": state.epoch, "objective": tot_obj, "bound_nll": -tot_bound / N, "lr": lr}
            if classify:
                rec["train_error"] = n_wrong / N
            else:
                rec["train_rmse"] = float(np.sqrt(sq_err / N)) * network.head.target_std
            metrics(rec)
        if on_epoch is not None:
            on_epoch(state)
    return state


def copy_state(state: TrainState) -> TrainState:
    return copy.deepcopy(state)
