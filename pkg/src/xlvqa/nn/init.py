"""Weight initializers."""

from __future__ import annotations

import numpy as np

from .rng import derive_rng
from .tensor import DEFAULT_DTYPE, Tensor


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return derive_rng(int(seed))


def normal_init(shape, std: float, seed, dtype=DEFAULT_DTYPE) -> Tensor:
    rng = _as_generator(seed)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def zeros_init(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_init(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def orthogonal_init(rows: int, cols: int, seed, dtype=DEFAULT_DTYPE) -> Tensor:
    """Orthogonal (rows, cols) matrix via QR of a Gaussian draw.

    Row vectors are orthonormal when rows <= cols, column vectors otherwise.
    Signs are corrected with diag(R) so the draw is deterministic in the seed
    and uniform over the orthogonal group.
    """
    if rows < 1 or cols < 1:
        raise ValueError("orthogonal_init requires rows >= 1 and cols >= 1")
    rng = _as_generator(seed)
    a = rng.standard_normal((rows, cols))
    if rows < cols:
        q, r = np.linalg.qr(a.T)
        q = q * np.sign(np.diag(r))
        w = q.T
    else:
        q, r = np.linalg.qr(a)
        w = q * np.sign(np.diag(r))
    return Tensor(np.ascontiguousarray(w, dtype=dtype), requires_grad=True)
