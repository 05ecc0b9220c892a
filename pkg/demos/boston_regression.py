"""Regression on the housing table with a Gaussian head.

A 13-50 network with five-level weights and a constant bias unit. The
analytic pass returns predictive mean, variance, skewness and kurtosis per
house; RMSE is reported for each prediction mode.
"""

import numpy as np

from bqn import QuantizationGrid, TrainConfig, analytic_infer, evaluate, mlp, train
from bqn.io import load_csv

tr, te = load_csv("tests/data/boston_housing.csv", test_size=50, split_seed=0)
net = mlp([13, 50], head="gaussian", grid=QuantizationGrid(np.arange(-2.0, 3.0)), bias_input=3.0,
          target_mean=tr.target_mean, target_std=tr.target_std)
state = train(net, TrainConfig(epochs=300, batch_size=16, lr0=0.02, lr_decay=0.99),
              tr.x, tr.y, metrics=lambda r: print(r) if r["epoch"] % 100 == 0 else None)
pred = analytic_infer(net, state.params, te.x[:5])
for m, v, g, k, y in zip(pred.mu, pred.nu, pred.gamma, pred.kappa, te.y[:5]):
    print(f"target {y:5.1f}  mean {m:5.1f}  sd {np.sqrt(v):4.1f}  skew {g:+.2f}  kurt {k:.2f}")
for mode in ("ai", "mc", "map"):
    r = evaluate(net, state.params, te.x, te.y, mode, S=20)
    print(f"{mode:>3}: RMSE {r.rmse:.3f}  NLL {r.nll_nats:.3f}")
