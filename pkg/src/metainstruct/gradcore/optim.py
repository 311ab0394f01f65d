"""SGD and Adam over a :class:`ParamRegistry`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .params import ParamRegistry


@dataclass
class OptimizerState:
    kind: Literal["sgd", "adam"]
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    # per-parameter moment buffers and update counts (Adam only)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


def sgd(lr: float) -> OptimizerState:
    return OptimizerState("sgd", lr)


def adam(lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState("adam", lr, beta1, beta2, eps)


def optimizer_step(state: OptimizerState, registry: ParamRegistry) -> None:
    """Apply one update to every trainable entry, then clear all grads.

    Missing grads count as zero. Adam keeps one bias-correction counter per
    parameter so that groups which sit out some steps (alternating schedules)
    are corrected by their own update count.
    """
    lr = state.learning_rate
    for name in registry:
        p = registry[name]
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.kind == "sgd":
            if lr != 0.0:
                p.data -= (lr * g).astype(p.data.dtype, copy=False)
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        t = state.t.get(name, 0) + 1
        state.t[name] = t
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if lr == 0.0:
            continue
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype, copy=False)
    state.step_count += 1
    registry.zero_grad()
