"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], weights: np.ndarray, h: float) -> list[np.ndarray]:
    """d/dx of ``sum(weights * fn(*inputs))`` by central differences, one entry at a time."""
    grads = []
    with T.no_grad():
        for k, base in enumerate(inputs):
            g = np.zeros(base.shape, dtype=np.float64)
            for idx in np.ndindex(base.shape):
                vals = []
                for step in (h, -h):
                    bumped = [np.array(a, copy=True) for a in inputs]
                    bumped[k][idx] += step
                    out = fn(*[Tensor(a) for a in bumped]).data.astype(np.float64)
                    vals.append(float(np.sum(weights * out)))
                g[idx] = (vals[0] - vals[1]) / (2 * h)
            grads.append(g)
    return grads


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    h: float = 1e-3,
    floor: float = 1e-4,
) -> float:
    """Largest elementwise relative error between analytic and numerical gradients.

    The relative error is ``|a - n| / max(|a|, |n|, floor)``. Inputs are cast
    to the active tensor dtype; wrap the call in ``tensor.precision`` to pick it.
    """
    inputs = [np.asarray(a, dtype=T.DTYPE) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in inputs]
    out = fn(*leaves)
    weights = rng.standard_normal(out.shape)
    T.tensor_sum(out * Tensor(weights)).backward()
    numeric = numerical_gradients(fn, inputs, weights, h)
    worst = 0.0
    for leaf, num in zip(leaves, numeric):
        ana = np.zeros(num.shape) if leaf.grad is None else leaf.grad.astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
