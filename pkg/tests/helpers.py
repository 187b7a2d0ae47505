"""Shared numeric helpers for the test suite."""

from __future__ import annotations

import math

import numpy as np
import torch


def digamma_oracle(x: float) -> float:
    """Independent digamma: recurrence up to x >= 20, then asymptotic series.

    Truncation error of the Bernoulli series at x >= 20 is ~5e-18, below
    double-precision resolution, so this is a valid 1e-10 oracle.
    """
    if x <= 0:
        raise ValueError("x must be positive")
    acc = 0.0
    while x < 20.0:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    tail = 1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 / 132)))
    return acc + math.log(x) - 0.5 / x - inv2 * tail


def central_difference_grad(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector."""
    x = np.array(x, dtype=np.float64)  # own the buffer: we perturb in place
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def autograd_gradient(loss_fn, evidence: np.ndarray) -> np.ndarray:
    """Analytic gradient of a scalar torch loss w.r.t. a raw evidence array."""
    e = torch.tensor(evidence, dtype=torch.float64, requires_grad=True)
    loss = loss_fn(e)
    loss.backward()
    return e.grad.detach().numpy()
