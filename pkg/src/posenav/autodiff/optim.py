"""Hand-rolled Adam with bias correction.

theta <- theta - lr * m_hat / (sqrt(v_hat) + eps), where m_hat and v_hat
are the bias-corrected first and second moment estimates.  Parameters are
updated in place between tape builds; never while a tape referencing them
is still to be replayed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def reset(self) -> None:
        self.t = 0
        self.m = []
        self.v = []


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    """One Adam update, in place on each param's value."""
    if len(params) != len(grads):
        raise ValueError("params and grads must align")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state was initialized for a different param list")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.value.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.value.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("adam_step received a non-finite gradient")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
