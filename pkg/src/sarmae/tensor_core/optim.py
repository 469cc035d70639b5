"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamWState,
    decay_mask: Sequence[bool] | None = None,
) -> None:
    """Update ``params`` in place and advance ``state`` by one step.

    Weight decay shrinks the weights directly (``p -= lr * wd * p``) before the
    Adam update; it never enters the moment estimates. ``decay_mask`` selects
    which parameters decay (default: all).
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        decay = state.weight_decay if decay_mask is None or decay_mask[i] else 0.0
        if decay:
            p *= p.dtype.type(1.0 - state.lr * decay)
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2) + state.eps
        p -= (state.lr * (m / bc1) / denom).astype(p.dtype)


class AdamW:
    """Optimizer over a list of parameter tensors.

    One-dimensional parameters (biases, norm scales) and the mask token are
    exempt from weight decay by default.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decay_mask: Sequence[bool] | None = None,
    ):
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
        if decay_mask is None:
            decay_mask = [p.ndim >= 2 for p in self.params]
        self.decay_mask = list(decay_mask)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.decay_mask)

    def grad_norm(self) -> float:
        sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params if p.grad is not None)
        return float(np.sqrt(sq))
