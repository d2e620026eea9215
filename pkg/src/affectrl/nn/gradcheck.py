"""Finite-difference gradient checking against the autograd engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max over entries of |analytic - central difference| / max(1, |analytic|).

    ``f`` rebuilds the scalar loss from the current values of ``params``. With
    ``max_entries`` set, a seeded random subset of entries per tensor is probed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss at the unperturbed point")
    if loss.requires_grad:
        backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError(f"non-finite loss at perturbed entry {i} of shape {p.shape}")
                numeric = (fp - fm) / (2.0 * step)
                a = float(ga.reshape(-1)[i])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    for p in params:
        p.grad = None
    return worst
