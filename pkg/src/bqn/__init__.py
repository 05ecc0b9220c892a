"""Sampling-free Bayesian quantized networks in numpy."""

from .distributions import (BINARY, CategoricalVector, GridError, InvalidParameterError, MomentSummary,
                            QuantizationGrid, WiringError, entropy, map_select, moments, sample)
from .fft import ConsistencyError, IntegerPmf, avg_pool, max_pool, prob_pool, sum_backward_fft, sum_via_fft
from .clt import LinearPosterior, clt_backward, clt_forward, sign_activation
from .heads import (GaussianHead, SoftmaxHead, gaussian_bound, gaussian_bound_grads, gaussian_predict,
                    softmax_bound, softmax_bound_grads, softmax_predict)
from .network import (AvgPool2d, Conv2d, Dense, Flatten, MaxPool2d, Network, PropagationError, build_network,
                      mlp, validity_checks)
from .trainer import TrainConfig, TrainState, adam_step, augment, init_params, objective, train
from .inference import EvalReport, analytic_infer, compress, deterministic_forward, evaluate, mc_predict

__version__ = "0.1.0"
