"""Finite-difference verification of analytic gradients.

Central differences in 64-bit; the loss callable must be deterministic
(dropout off) or the check refuses to run.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .rng import derive_rng
from .tensor import Tensor


class NonDeterministicLossError(RuntimeError):
    """The loss callable returned different values on identical inputs."""


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    seed: int = 0,
) -> float:
    """Return the max relative error between analytic and numeric gradients.

    ``f`` recomputes the scalar loss from the current parameter values. For
    tensors larger than ``max_coords_per_tensor`` a deterministic random
    subset of coordinates is probed. Relative error uses a 1e-6 floor so
    coordinates whose true gradient is pure roundoff do not dominate.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("step size h must lie in [1e-6, 1e-3]")
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 parameters, got {p.data.dtype} for {name!r}")

    loss0 = f()
    if loss0.data.size != 1:
        raise ValueError("loss must be scalar")
    if not np.isfinite(loss0.data):
        raise FloatingPointError("non-finite loss")
    if float(f().data) != float(loss0.data):
        raise NonDeterministicLossError(
            "loss is not deterministic; disable dropout before gradient checking"
        )

    loss0.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    rng = derive_rng(seed, "grad-check")
    max_err = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if max_coords_per_tensor is not None and size > max_coords_per_tensor:
            coords = rng.choice(size, size=max_coords_per_tensor, replace=False)
        else:
            coords = np.arange(size)
        ga = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(f().data)
            flat[i] = orig - h
            lm = float(f().data)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            err = abs(ga[i] - numeric) / max(abs(ga[i]), abs(numeric), 1e-6)
            if err > max_err:
                max_err = err
    return max_err
