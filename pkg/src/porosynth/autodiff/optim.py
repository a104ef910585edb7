"""Adam with bias correction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, state):
    """Apply one Adam update to ``params`` in place using their ``.grad``."""
    if not state.m:
        state.m = [np.zeros_like(p.data, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p.data, dtype=np.float64) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad.astype(np.float64)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= upd.astype(p.data.dtype)
    return params


def cosine_lr(step, total, lr0, lr1):
    """Cosine decay from ``lr0`` at step 0 to ``lr1`` at ``total - 1``."""
    if total <= 1:
        return lr0
    t = min(step, total - 1) / (total - 1)
    return lr1 + 0.5 * (lr0 - lr1) * (1 + math.cos(math.pi * t))
