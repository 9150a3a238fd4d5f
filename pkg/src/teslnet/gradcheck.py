"""Central finite-difference verification of tape gradients.

Checks run in float64; finite differences are too noisy in float32 to
resolve the 1e-4 acceptance threshold.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import GradTape, Tensor


def grad_check_wrt(
    make_loss: Callable[[], Tensor],
    var: Tensor,
    epsilon: float = 1e-5,
    sample: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape and central-difference gradients of
    ``make_loss()`` with respect to ``var`` (perturbed in place).

    ``sample`` limits the check to that many randomly chosen entries; large
    tensors are otherwise quadratic-cost to verify exhaustively.
    """
    if var.data.dtype != np.float64:
        raise TypeError("grad_check requires float64 tensors")
    var.requires_grad = True
    var.grad = np.zeros_like(var.data)
    with GradTape() as tape:
        loss = make_loss()
        tape.backward(loss)
    analytic = var.grad.ravel().copy()

    flat = var.data.ravel()
    indices = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        indices = np.random.default_rng(seed).choice(flat.size, size=sample, replace=False)
    max_err = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = make_loss().item()
        flat[i] = orig - epsilon
        fm = make_loss().item()
        flat[i] = orig
        fd = (fp - fm) / (2.0 * epsilon)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        max_err = max(max_err, err)
    return max_err


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5,
               sample: Optional[int] = None) -> float:
    """Spec-shaped entry point: check df/dx for scalar-valued ``f``."""
    var = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    return grad_check_wrt(lambda: f(var), var, epsilon=epsilon, sample=sample)
