"""Central finite-difference checking of tape gradients.

Finite differences are unreliable in float32, so inputs must be float64.
The returned figure is max over coordinates of |a - n| / max(|a|, |n|, 1e-8)
where a is the tape gradient and n the central difference
(f(x+eps) - f(x-eps)) / (2 eps).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward

__all__ = ["gradcheck", "gradcheck_params"]


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x0: Tensor,
    eps: float = 1e-5,
    batch_eval: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Max relative error between tape and numeric gradients of scalar f at x0.

    `batch_eval`, when given, maps a stack of inputs (M, *x0.shape) to the M
    scalar values of f and is used to evaluate perturbations in batches; it
    is only sound when f treats stacked inputs independently.
    """
    if x0.data.dtype != np.float64:
        raise TypeError("gradcheck requires a float64 input tensor")

    x = Tensor(x0.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    grads = backward(tape, y)
    analytic = grads.get(x.uid)
    if analytic is None:
        analytic = np.zeros_like(x.data)

    base = x0.data.copy()
    flat = base.reshape(-1)
    n_coords = flat.size
    numeric = np.empty(n_coords, dtype=np.float64)

    if batch_eval is None:
        for i in range(n_coords):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - eps
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    else:
        chunk = 64
        for start in range(0, n_coords, chunk):
            idx = np.arange(start, min(start + chunk, n_coords))
            stack = np.broadcast_to(base, (2 * idx.size,) + base.shape).copy()
            sflat = stack.reshape(2 * idx.size, -1)
            sflat[np.arange(idx.size), idx] += eps
            sflat[idx.size + np.arange(idx.size), idx] -= eps
            vals = np.asarray(batch_eval(stack), dtype=np.float64)
            numeric[idx] = (vals[: idx.size] - vals[idx.size :]) / (2.0 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))


def gradcheck_params(
    build_loss: Callable[[], Tensor],
    tensors,
    eps: float = 1e-5,
) -> float:
    """Max relative error over every coordinate of the given parameter tensors.

    `build_loss` must be a pure scalar function of the tensors' current
    values; finite differences perturb each tensor's data in place and
    restore it. All tensors must be float64 leaves with requires_grad.
    """
    tensors = list(tensors)
    for t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError("gradcheck_params requires float64 parameters")

    with Tape() as tape:
        loss = build_loss()
    grads = backward(tape, loss)

    worst = 0.0
    for t in tensors:
        analytic = grads.get(t.uid)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        a = analytic.reshape(-1)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = build_loss().item()
            flat[i] = orig - eps
            fm = build_loss().item()
            flat[i] = orig
            n = (fp - fm) / (2.0 * eps)
            rel = abs(a[i] - n) / max(abs(a[i]), abs(n), 1e-8)
            if rel > worst:
                worst = rel
    return worst
