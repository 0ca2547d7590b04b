"""Adam with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Update ``params`` in place from ``grads`` and return them.

    Parameters are updated in place so that views held elsewhere (batch-norm
    scale/shift) stay bound to the optimised arrays.
    """
    missing = set(params) ^ set(grads)
    if missing:
        raise ValueError(f"params/grads keys differ: {sorted(missing)}")
    for k in params:
        if params[k].shape != grads[k].shape:
            raise ValueError(f"shape mismatch for {k!r}: {params[k].shape} vs {grads[k].shape}")

    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params
