"""AdamW with decoupled weight decay, plus global-norm gradient clipping.

Weight decay multiplies parameters by (1 - lr*wd) before the moment-based
update and never enters the moment accumulators. Frozen parameters must be
excluded by the caller; the optimizer touches exactly the entries it is
handed.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .tensor import Tensor


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g)))
    return math.sqrt(total)


def clip_global_norm(grads: Mapping[str, np.ndarray], ceiling: float) -> dict[str, np.ndarray]:
    """Scale all gradients by ceiling/N when the global L2 norm N exceeds ceiling."""
    if ceiling <= 0:
        raise ValueError("clip ceiling must be positive")
    norm = global_norm(grads)
    if norm <= ceiling:
        return dict(grads)
    scale = ceiling / norm
    return {k: g * scale for k, g in grads.items()}


class AdamW:
    def __init__(
        self,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        clip_norm: float | None = None,
    ):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(
        self,
        params: Mapping[str, Tensor],
        grads: Mapping[str, np.ndarray],
        lr: float | None = None,
    ) -> None:
        """One update, in place. ``grads`` must already be clipped if desired."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name!r}")
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            mhat = m / bc1
            vhat = v / bc2
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
