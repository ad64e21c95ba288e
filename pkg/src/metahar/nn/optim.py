"""Adam with bias correction, operating on ParamSets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .params import ParamSet


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    t: int = 0
    m: Optional[ParamSet] = None
    v: Optional[ParamSet] = None

    def reset(self) -> None:
        self.t = 0
        self.m = None
        self.v = None


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState) -> Tuple[ParamSet, AdamState]:
    """Apply one Adam update; returns the new parameters and the (mutated) state.

    Parameters absent from ``grads`` are left untouched, so a frozen subset
    can be expressed by passing gradients for the trainable names only.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    if state.m is None or list(state.m) != list(grads):
        state.m = grads.zeros_like()
        state.v = grads.zeros_like()
        state.t = 0
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    new_m, new_v, updates = [], [], {}
    for name, g in grads.items():
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_m.append((name, m))
        new_v.append((name, v))
        if state.lr == 0.0:
            continue
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        updates[name] = params[name] - step
    state.m = ParamSet(new_m)
    state.v = ParamSet(new_v)
    return (params.updated(updates) if updates else params.copy()), state
