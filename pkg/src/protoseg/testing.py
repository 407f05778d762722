"""Independent checking helpers shared by the test suite."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .numerics import Tensor


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-4) -> float:
    """Compare autodiff against finite differences for every input of ``fn``.

    ``fn`` maps tensors to a scalar tensor. Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):
        def f():
            return fn(*[Tensor(x) for x in arrays]).item()

        num = numeric_grad(f, a, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, max_rel_error(ana, num))
    return worst
