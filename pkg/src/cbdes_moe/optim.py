"""AdamW with decoupled weight decay and a linear-warmup cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numba
import numpy as np

from .tensor import Parameter

BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass
class AdamWState:
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamWState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    betas=BETAS,
    eps: float = EPS,
) -> None:
    """Update ``params`` in place.

    Decay shrinks the weights directly (``p *= 1 - lr * wd``) before the
    bias-corrected Adam step; it never passes through the moment estimates.
    A ``None`` gradient is treated as zero.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    decay = 1.0 - lr * weight_decay
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        _adamw_kernel(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1), decay, b1, b2, lr / c1, c2, eps)


@numba.njit(cache=True)
def _adamw_kernel(p, g, m, v, decay, b1, b2, step, c2, eps):  # pragma: no cover - compiled
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] = p[i] * decay - step * (mi / (np.sqrt(vi / c2) + eps))


class AdamW:
    def __init__(self, params: Sequence[Parameter], weight_decay: float = 0.01, betas=BETAS, eps: float = EPS):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamWState.zeros_like([p.data for p in self.params])

    def step(self, lr: float) -> None:
        adamw_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            lr,
            self.weight_decay,
            self.betas,
            self.eps,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_warmup_lr(step: int, total: int, warmup: int, lr_max: float) -> float:
    """Linear ramp from 0 to ``lr_max`` over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if total <= warmup:
        raise ValueError(f"total steps ({total}) must exceed warmup ({warmup})")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return lr_max * step / warmup
    progress = (step - warmup) / (total - warmup)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def default_warmup(total_steps: int) -> int:
    """500 iterations at full scale; 5% of the run for short desk-scale runs."""
    return 500 if total_steps >= 10000 else max(1, int(round(0.05 * total_steps)))
