"""Two interleaved half-moons with a binary-weight MLP.

Trains a 2-64-2 network with sign activations and a constant bias unit,
then compares the three prediction modes. The analytic pass gives class
probabilities without sampling; the Monte-Carlo ensemble and the single
MAP network are the deterministic quantized nets it summarizes. Each
hidden unit sees only three inputs, so the Gaussian pre-activation
approximation is rough here and the analytic and sampled modes differ
more than they do on wide layers.
"""

import numpy as np

from bqn import TrainConfig, evaluate, mlp, train


def moons(n, noise=0.15, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, np.pi, size=n)
    upper = rng.random(n) < 0.5
    x = np.where(upper[:, None], np.c_[np.cos(t), np.sin(t)], np.c_[1 - np.cos(t), 0.5 - np.sin(t)])
    x = x + rng.normal(scale=noise, size=x.shape)
    return (x - x.mean(axis=0)) / x.std(axis=0), (~upper).astype(int)


x, y = moons(1000)
xt, yt = moons(500, seed=1)
net = mlp([2, 64, 2], bias_input=1.0)
state = train(net, TrainConfig(epochs=60, batch_size=50, lr0=0.05, lam=1e-3),
              x, y, metrics=lambda r: print(r) if r["epoch"] % 20 == 0 else None)
for mode in ("ai", "mc", "map"):
    r = evaluate(net, state.params, xt, yt, mode, S=50)
    bound = " (upper bound)" if r.nll_is_upper_bound else ""
    print(f"{mode:>3}: error {r.error_rate:.3f}  NLL {r.nll_nats:.3f}{bound}")
