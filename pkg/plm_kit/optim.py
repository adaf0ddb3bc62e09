"""Adam with bias correction over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from plm_kit.errors import GradientStateError
from plm_kit.tensor import Tensor


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    hyper: AdamHyper
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Mapping[str, Tensor], hyper: AdamHyper) -> AdamState:
        return cls(
            hyper=hyper,
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> AdamState:
    """Apply one Adam update in place and advance ``state.step``.

    Parameters whose gradient is identically zero are skipped, moments
    included, so a zero-gradient step leaves them untouched. Gradients are
    read, never modified.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise GradientStateError(f"no gradient for {', '.join(missing[:5])}; run backward first")
    unknown = [name for name in params if name not in state.m]
    if unknown:
        raise GradientStateError(f"optimizer state has no moments for {', '.join(unknown[:5])}")

    h = state.hyper
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        if not np.any(g):
            continue
        m = h.beta1 * state.m[name] + (1 - h.beta1) * g
        v = h.beta2 * state.v[name] + (1 - h.beta2) * (g * g)
        m_hat = m / (1 - h.beta1**t)
        v_hat = v / (1 - h.beta2**t)
        state.m[name] = m
        state.v[name] = v
        p.data = (p.data - h.lr * m_hat / (np.sqrt(v_hat) + h.eps)).astype(p.data.dtype)
    return state
