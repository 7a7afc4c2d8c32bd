"""Adam optimizer with bias correction, plus gradient clipping by value."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .nn import Parameter

DEFAULT_LR = 0.0003
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8
DEFAULT_CLIP = 5.0


@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def moments(self, name: str, shape) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=np.float32)
            self.v[name] = np.zeros(shape, dtype=np.float32)
        return self.m[name], self.v[name]


def clip_gradients(grads: Mapping[str, np.ndarray], threshold: float = DEFAULT_CLIP) -> dict:
    """Clamp every gradient component to [-threshold, +threshold]."""
    if threshold <= 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    return {name: np.clip(g, -threshold, threshold) for name, g in grads.items()}


def adam_step(params: Sequence[Parameter], grads: Mapping[str, np.ndarray],
              state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Rejects the whole step when any gradient contains NaN, naming the
    offending parameter.
    """
    for p in params:
        g = grads[p.name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{p.name!r} shape {p.shape}")
        if np.isnan(g).any():
            raise ValueError(f"NaN gradient for parameter {p.name!r}; step rejected")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p in params:
        g = grads[p.name].astype(np.float32, copy=False)
        m, v = state.moments(p.name, p.shape)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.tensor.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
