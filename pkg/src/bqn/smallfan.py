"""Exact mean-field propagation for layers whose outputs depend on few variables.

Each output unit is a dense contraction of a conditional probability table
with the marginals of the variables it depends on. Deterministic elementwise
maps (sign, clipping, addition) are ordinary 0/1 tables.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .distributions import CategoricalVector, GridError, QuantizationGrid, WiringError, probabilities


@dataclass(frozen=True)
class ConditionalKernel:
    """``table[o, a, b, ...] = Pr[out = o | factor_1 = a, factor_2 = b, ...]``."""

    table: np.ndarray
    out_grid: QuantizationGrid

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim < 2:
            raise WiringError("kernel needs an output axis and at least one factor axis")
        if t.shape[0] != self.out_grid.size:
            raise WiringError("kernel output axis does not match its output grid")
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("kernel entries must lie in [0, 1]")
        if not np.allclose(t.sum(axis=0), 1.0, atol=1e-12):
            raise ValueError("each conditional slice must sum to 1 over the output axis")
        object.__setattr__(self, "table", t)

    @property
    def fan_in(self) -> int:
        return self.table.ndim - 1


def identity_kernel(grid: QuantizationGrid) -> ConditionalKernel:
    return ConditionalKernel(np.eye(grid.size), grid)


def deterministic_kernel(fn: Callable[..., float], in_grids: Sequence[QuantizationGrid],
                         out_grid: QuantizationGrid) -> ConditionalKernel:
    """0/1 table of ``out = fn(*inputs)``; results must land on ``out_grid``."""
    shape = (out_grid.size,) + tuple(g.size for g in in_grids)
    table = np.zeros(shape)
    for idx in np.ndindex(*shape[1:]):
        y = fn(*(g.values[i] for g, i in zip(in_grids, idx)))
        o = np.flatnonzero(np.isclose(out_grid.values, y))
        if o.size != 1:
            raise GridError(f"value {y} is not on the output grid")
        table[(o[0],) + idx] = 1.0
    return ConditionalKernel(table, out_grid)


def sign_kernel(grid: QuantizationGrid) -> ConditionalKernel:
    out = QuantizationGrid(np.array([-1.0, 1.0]))
    return deterministic_kernel(lambda x: 1.0 if x >= 0 else -1.0, [grid], out)


def _einsum_spec(n: int) -> tuple[str, list[str]]:
    letters = string.ascii_letters[:n]
    return "o" + letters, ["j" + c for c in letters]


def _factors(input: CategoricalVector, params: Optional[CategoricalVector], kernel: ConditionalKernel):
    factors = [probabilities(input)]
    if params is not None:
        factors.append(probabilities(params))
    # each factor block is [J, E_block, D]; split into per-variable [J, D]
    flat = []
    for block in factors:
        if block.ndim != 3:
            raise WiringError("factor blocks must have shape [n_outputs, fan_in, D]")
        flat.extend(block[:, e, :] for e in range(block.shape[1]))
    return flat


def contract_probs(table: np.ndarray, factors: Sequence[np.ndarray]) -> np.ndarray:
    """Contract a kernel with per-output factor marginals ``[J, D_k]`` -> ``[J, D_out]``."""
    if len(factors) != table.ndim - 1:
        raise WiringError(f"kernel expects {table.ndim - 1} factors, got {len(factors)}")
    J = factors[0].shape[0]
    for k, f in enumerate(factors):
        if f.shape != (J, table.shape[k + 1]):
            raise WiringError(f"factor {k} has shape {f.shape}, expected {(J, table.shape[k + 1])}")
    ker, fs = _einsum_spec(len(factors))
    # multilinear in the factors; rows already sum to 1 for valid inputs
    return np.einsum(",".join([ker] + fs) + "->jo", table, *factors, optimize=True)


def contract_probs_backward(table: np.ndarray, factors: Sequence[np.ndarray],
                            grad_out: np.ndarray) -> list[np.ndarray]:
    """Gradients w.r.t. every factor of the unnormalized contraction."""
    ker, fs = _einsum_spec(len(factors))
    grads = []
    for k in range(len(factors)):
        others = [f for i, f in enumerate(factors) if i != k]
        other_specs = [s for i, s in enumerate(fs) if i != k]
        spec = ",".join([ker, "jo"] + other_specs) + "->" + fs[k]
        grads.append(np.einsum(spec, table, grad_out, *others, optimize=True))
    return grads


def contract_forward(kernel: ConditionalKernel, input: CategoricalVector,
                     params: Optional[CategoricalVector] = None) -> CategoricalVector:
    """Output marginals ``[J, D_out]``; ``input`` (and ``params``) are ``[J, E, D]`` blocks."""
    factors = _factors(input, params, kernel)
    return CategoricalVector.from_probs(contract_probs(kernel.table, factors), kernel.out_grid)


def contract_backward(kernel: ConditionalKernel, input: CategoricalVector,
                      params: Optional[CategoricalVector], grad_out: np.ndarray):
    """Gradients w.r.t. the input and parameter probabilities (same block layout).

    The contraction is multilinear, so the gradient for one factor is the
    contraction of the table with ``grad_out`` and all other factors.
    """
    factors = _factors(input, params, kernel)
    grads = contract_probs_backward(kernel.table, factors, np.asarray(grad_out, dtype=np.float64))
    n_in = input.shape[1]
    g_in = np.stack(grads[:n_in], axis=1)
    g_par = np.stack(grads[n_in:], axis=1) if params is not None else None
    return g_in, g_par


def shortcut_add(a: CategoricalVector, b: CategoricalVector) -> CategoricalVector:
    """Distribution of ``a + b`` for independent units on evenly spaced grids."""
    aa, ab = a.grid.affine(), b.grid.affine()
    if aa is None or ab is None:
        raise GridError("shortcut addition needs evenly spaced grids")
    if not np.isclose(aa[1], ab[1]):
        raise GridError(f"grid steps differ ({aa[1]} vs {ab[1]})")
    if a.shape != b.shape:
        raise WiringError("shortcut operands have different shapes")
    pa, pb = probabilities(a), probabilities(b)
    Da, Db = pa.shape[-1], pb.shape[-1]
    out = np.zeros(pa.shape[:-1] + (Da + Db - 1,))
    for i in range(Da):
        out[..., i:i + Db] += pa[..., i:i + 1] * pb
    step = aa[1]
    grid = QuantizationGrid(aa[0] + ab[0] + step * np.arange(Da + Db - 1))
    return CategoricalVector.from_probs(out, grid)
