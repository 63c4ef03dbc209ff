"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


def cosine_factor(step, total_steps):
    """0.5 * (1 + cos(pi * step / total_steps)); 1 at step 0, 0 at the end."""
    if total_steps <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


@dataclass
class AdamWState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    skipped: int = 0


def optimizer_step(params, grads, state, lr=2e-4, beta1=0.9, beta2=0.999,
                   weight_decay=1e-2, eps=1e-8, schedule=1.0):
    """One AdamW update in place. Returns False (and skips) on non-finite gradients."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", state.t + 1)
        return False
    state.t += 1
    step_lr = lr * schedule
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data *= 1.0 - step_lr * weight_decay
        p.data -= step_lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True
