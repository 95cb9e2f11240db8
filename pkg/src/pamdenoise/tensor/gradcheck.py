"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Tape, Tensor, UsageError, backward


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients of ``f`` at ``x``.

    Per element: |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    ``f`` must be deterministic; a stochastic ``f`` gives meaningless results.
    """
    if not 0 < h:
        raise UsageError("step size must be positive")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
    if loss.data.size != 1:
        raise UsageError("grad_check: f must return a scalar")
    backward(loss, tape)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base)).item()
        flat[i] = orig - h
        fm = f(Tensor(base)).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
