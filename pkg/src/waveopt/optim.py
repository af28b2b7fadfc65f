"""Adam updates on nodewise parameter fields, plus bound clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import ConfigError


class NumericalDivergenceError(RuntimeError):
    """Optimization ran away (cost grew 10x over its start value)."""


@dataclass
class AdamState:
    """Per-node first/second moment estimates and hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, shape, alpha, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=np.zeros(shape), v=np.zeros(shape), t=0,
                   alpha=float(alpha), beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params, grad):
    """One bias-corrected Adam update; returns (state, new params)."""
    params = np.asarray(params)
    grad = np.asarray(grad)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ConfigError(
            f"shape mismatch: params {params.shape}, grad {grad.shape}, "
            f"state {state.m.shape}"
        )
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return state, params - state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_bounds(params, lo, hi, frozen_mask=None, frozen_value=None):
    """Nodewise clamp to [lo, hi]; frozen nodes pinned to frozen_value."""
    if not lo < hi:
        raise ConfigError(f"need lo < hi, got [{lo}, {hi}]")
    out = np.clip(params, lo, hi)
    if frozen_mask is not None:
        out[np.asarray(frozen_mask, dtype=bool)] = (
            lo if frozen_value is None else frozen_value
        )
    return out
