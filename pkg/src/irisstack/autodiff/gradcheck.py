"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < 1e-15:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    indices: Sequence[int],
    eps: float = 1e-3,
) -> np.ndarray:
    """d fn() / d tensor at the given flat indices by central differences."""
    flat = tensor.data.reshape(-1)
    out = np.empty(len(indices), dtype=np.float64)
    for j, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + eps
        up = fn().item()
        flat[idx] = orig - eps
        down = fn().item()
        flat[idx] = orig
        out[j] = (up - down) / (2 * eps)
    return out


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between backprop and finite differences over ``tensors``.

    ``fn`` must rebuild the graph from the (mutated) tensors on every call. When
    ``max_entries`` is set, that many random entries per tensor are probed.
    """
    for t in tensors:
        t.zero_grad()
    fn().backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        size = t.data.size
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, size=max_entries, replace=False))
        else:
            idx = np.arange(size)
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)[idx]
        numeric = numeric_grad(fn, t, idx, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
