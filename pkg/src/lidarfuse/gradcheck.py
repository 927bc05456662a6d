"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor


def numeric_grad(
    fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5, entries: np.ndarray | None = None
) -> np.ndarray:
    """Central difference of the scalar ``fn()`` w.r.t. entries of ``x`` (all, or the given flat indices)."""
    grad = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    seed: int = 0,
    max_entries: int | None = None,
) -> list[float]:
    """Compare analytic and finite-difference gradients of ``fn(*inputs)``.

    Non-scalar outputs are reduced with fixed random weights so every output
    element participates.  Returns the max relative error per input.
    """
    out = fn(*inputs)
    rng = np.random.default_rng(seed)
    weights = None if out.size == 1 else Tensor(rng.standard_normal(out.shape))

    def scalar() -> Tensor:
        o = fn(*inputs)
        return o if weights is None else (o * weights).sum()

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    scalar().backward()
    errs = []
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        if max_entries is None or t.size <= max_entries:
            errs.append(relative_error(analytic, numeric_grad(scalar, t, h)))
        else:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
            numeric = numeric_grad(scalar, t, h, idx).reshape(-1)[idx]
            errs.append(relative_error(analytic.reshape(-1)[idx], numeric))
    return errs
