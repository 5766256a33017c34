"""Central finite-difference gradient checks.

The numeric side always evaluates the function in float64, whatever the
precision of the analytic pass, so it stays an independent oracle for
32-bit gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n||_2 / ||n||_2`` (absolute when the reference gradient vanishes)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.linalg.norm(n)
    diff = np.linalg.norm(a - n)
    return float(diff / scale) if scale > 1e-12 else float(diff)


def numeric_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], wrt: int,
                     h: float = 1e-3, indices=None) -> np.ndarray:
    base = [np.array(x, dtype=np.float64) for x in inputs]
    flat_idx = range(base[wrt].size) if indices is None else indices
    out = np.zeros(len(flat_idx))
    for j, i in enumerate(flat_idx):
        vals = []
        for step in (h, -h):
            args = [b.copy() for b in base]
            args[wrt].reshape(-1)[i] += step
            vals.append(float(fn(*[Tensor(a) for a in args]).data))
        out[j] = (vals[0] - vals[1]) / (2 * h)
    return out


def analytic_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], dtype) -> list[np.ndarray]:
    ts = [Tensor(np.asarray(x, dtype=dtype), requires_grad=True) for x in inputs]
    fn(*ts).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], dtype=np.float32,
              h: float = 1e-3, wrt: Sequence[int] | None = None) -> float:
    """Largest relative error over the checked inputs."""
    grads = analytic_gradient(fn, inputs, dtype)
    worst = 0.0
    for k in (range(len(inputs)) if wrt is None else wrt):
        num = numeric_gradient(fn, inputs, k, h)
        worst = max(worst, relative_error(grads[k].ravel(), num))
    return worst
