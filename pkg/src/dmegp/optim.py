"""Adam optimizer over lists of parameter arrays (gradient ascent).

State and updates are pure: ``adam_step`` returns fresh arrays and a fresh
state, which keeps training loops reproducible and snapshots cheap. The
update direction is ascent because every objective in this package is a
log likelihood.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch

__all__ = ["AdamState", "adam_step"]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays: list[np.ndarray], step_size: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays],
                   t=0, step_size=step_size, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(
    state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected moment update; ascent on the objective.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
    params <- params + step_size * m_hat / (sqrt(v_hat) + eps).
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeMismatch("parameter/gradient/state group counts differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"shape {p.shape} vs gradient {g.shape} vs state {m.shape}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * g * g
        m_hat = m2 / (1.0 - b1**t)
        v_hat = v2 / (1.0 - b2**t)
        new_m.append(m2)
        new_v.append(v2)
        new_p.append(p + state.step_size * m_hat / (np.sqrt(v_hat) + state.eps))
    return new_p, AdamState(m=new_m, v=new_v, t=t, step_size=state.step_size,
                            beta1=b1, beta2=b2, eps=state.eps)
