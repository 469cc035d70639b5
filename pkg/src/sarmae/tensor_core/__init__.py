from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import (
    conv2d,
    cross_entropy,
    elu,
    gelu,
    layernorm,
    log_softmax,
    mse,
    relu,
    rmse,
    softmax,
    upsample2x,
)
from .optim import AdamW, AdamWState, adamw_step
from .rng import derive_seed, make_rng, trunc_normal
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    gather_tokens,
    getitem,
    is_grad_enabled,
    linear,
    matmul,
    no_grad,
    reshape,
    swapaxes,
    transpose,
)
from .gradcheck import gradcheck, numerical_grad

__all__ = [
    "AdamW",
    "AdamWState",
    "CheckpointError",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "broadcast_to",
    "concat",
    "conv2d",
    "cross_entropy",
    "derive_seed",
    "elu",
    "gather_tokens",
    "gelu",
    "getitem",
    "gradcheck",
    "is_grad_enabled",
    "layernorm",
    "linear",
    "load_checkpoint",
    "log_softmax",
    "make_rng",
    "matmul",
    "mse",
    "no_grad",
    "numerical_grad",
    "relu",
    "reshape",
    "rmse",
    "save_checkpoint",
    "softmax",
    "swapaxes",
    "transpose",
    "trunc_normal",
    "upsample2x",
]
