"""AdamW and exponential-moving-average updates over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWState:
    """Per-parameter moments plus hyperparameters. lr is mutable so a plateau
    schedule can shrink it between steps."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adamw(params: dict, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 1e-2) -> AdamWState:
    state = AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(params: dict, grads: dict, state: AdamWState) -> tuple[dict, AdamWState]:
    """One decoupled-weight-decay Adam update.

    Deterministic in (params, grads, state); mutates both in place and
    returns them. Parameters without a gradient entry are left untouched.
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p.data)
    return params, state


def ema_update(shadow: dict, params: dict, decay: float = 0.999) -> dict:
    """shadow <- decay*shadow + (1-decay)*params, in place."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must satisfy 0 <= decay < 1, got {decay}")
    for name, p in params.items():
        value = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        s = shadow[name]
        if s.shape != value.shape:
            raise ValueError(f"EMA shape mismatch for '{name}': {s.shape} vs {value.shape}")
        s *= decay
        s += (1.0 - decay) * value
    return shadow


def init_ema(params: dict) -> dict:
    return {name: p.data.copy() for name, p in params.items()}


def collect_grads(params: dict) -> dict:
    """Named gradient arrays for every parameter that accumulated one."""
    return {name: p.grad for name, p in params.items() if p.grad is not None}
