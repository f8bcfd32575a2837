"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, precision


def grad_check(
    f: Callable[[], Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` is a zero-argument closure over ``inputs`` returning a scalar
    Tensor. For each checked coordinate the error is
    ``|analytic - fd| / (|analytic| + |fd| + 1e-12)``. Everything runs in
    float64; inputs are converted in place. ``max_coords`` caps the number of
    coordinates probed per input (chosen with a seeded generator).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        for t in inputs:
            t.data = t.data.astype(np.float64)
            t.requires_grad = True
            t.grad = None
        out = f()
        if out.data.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
        out.backward()
        worst = 0.0
        for t in inputs:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            a_flat = analytic.reshape(-1)
            with no_grad():
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(f().data)
                    flat[i] = orig - eps
                    fm = float(f().data)
                    flat[i] = orig
                    fd = (fp - fm) / (2.0 * eps)
                    err = abs(a_flat[i] - fd) / (abs(a_flat[i]) + abs(fd) + 1e-12)
                    worst = max(worst, err)
    return worst
