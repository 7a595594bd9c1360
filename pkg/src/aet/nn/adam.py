"""Bias-corrected Adam over a :class:`NetworkParams` tensor table."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def adam_step(params, grads: dict, state: AdamState, max_grad_norm: float | None = None):
    """Apply one Adam update in place. Returns ``(params, state, info)``.

    A non-finite gradient skips the update entirely (step count unchanged)
    and is reported through ``info["skipped"]``.
    """
    for name, g in grads.items():
        if g.shape != params.tensors[name].data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected "
                             f"{params.tensors[name].data.shape}")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        state.skipped += 1
        return params, state, {"skipped": True, "grad_norm": norm}
    factor = 1.0
    if max_grad_norm is not None and norm > max_grad_norm:
        factor = max_grad_norm / (norm + 1e-12)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params.tensors[name]
        g = g * factor if factor != 1.0 else g
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return params, state, {"skipped": False, "grad_norm": norm}
