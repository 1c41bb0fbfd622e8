"""Finite-difference verification of reverse-mode gradients."""
from typing import Callable

import numpy as np

from .engine import Tape, Tensor, backward


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               atol: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps ``x`` to a scalar tensor. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, atol)`` so near-zero gradients are compared
    absolutely.
    """
    if not eps > 0:
        raise ValueError("invalid step: eps must be positive")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        loss = f(x)
    backward(loss, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(x).data)
        flat[i] = orig - eps
        down = float(f(x).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * eps)
    x.grad = None
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
