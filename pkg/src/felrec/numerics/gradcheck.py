"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from felrec.numerics.tensor import Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place one entry at a time."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Worst relative error over ``inputs`` between backprop and finite differences.

    A non-scalar output is reduced with fixed random weights so that every
    output entry contributes to the checked scalar.
    """
    out = fn(*inputs)
    weights = np.random.default_rng(seed).normal(size=out.shape)

    def scalar() -> Tensor:
        res = fn(*inputs)
        return res if res.ndim == 0 else (res * Tensor(weights)).sum()

    for t in inputs:
        t.grad = None
    scalar().backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(lambda: float(scalar().data), t.data, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
