"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward

DENOMINATOR_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOMINATOR_FLOOR) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every element of ``t``."""
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradients(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    h: float = 1e-5,
    mask: Callable[[Tensor], np.ndarray] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from the current values of ``wrt``.
    ``mask`` optionally selects the elements to compare per tensor.
    """
    for t in wrt:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]
    worst = 0.0
    for t, a in zip(wrt, analytic):
        n = numeric_grad(fn, t, h)
        if mask is not None:
            m = mask(t)
            a, n = a[m], n[m]
        worst = max(worst, relative_error(a, n))
    return worst
