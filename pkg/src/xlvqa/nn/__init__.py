from .tensor import (
    DEFAULT_DTYPE,
    NonFiniteError,
    Tensor,
    add,
    concat,
    embedding,
    getitem,
    grad_enabled,
    matmul,
    mul,
    no_grad,
    reshape,
    set_finite_checks,
    tmean,
    transpose,
    tsum,
)
from .functional import affine, cross_entropy, dropout, gelu, layer_norm, softmax
from .gradcheck import NonDeterministicLossError, grad_check
from .init import normal_init, ones_init, orthogonal_init, zeros_init
from .optim import AdamW, clip_global_norm, global_norm
from .rng import derive_rng, seed_from
from .serialize import load_tensors, save_tensors

__all__ = [
    "DEFAULT_DTYPE",
    "NonFiniteError",
    "NonDeterministicLossError",
    "Tensor",
    "AdamW",
    "add",
    "affine",
    "clip_global_norm",
    "concat",
    "cross_entropy",
    "derive_rng",
    "dropout",
    "embedding",
    "gelu",
    "getitem",
    "global_norm",
    "grad_check",
    "grad_enabled",
    "layer_norm",
    "load_tensors",
    "matmul",
    "mul",
    "no_grad",
    "normal_init",
    "ones_init",
    "orthogonal_init",
    "reshape",
    "save_tensors",
    "seed_from",
    "set_finite_checks",
    "softmax",
    "tmean",
    "transpose",
    "tsum",
    "zeros_init",
]
