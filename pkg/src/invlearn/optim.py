"""Adam for committed updates, plain scaled steps for candidate exploration."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from invlearn.errors import ConfigError, NumericError, ShapeError
from invlearn.model import Grads, ModelParams, apply_step, grads_finite


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, lr: float, **kw) -> AdamState:
        if not lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        return cls(
            lr=lr,
            first_moment={k: np.zeros_like(v) for k, v in params.weights.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.weights.items()},
            **kw,
        )

    def copy(self) -> AdamState:
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step_count,
            {k: v.copy() for k, v in self.first_moment.items()},
            {k: v.copy() for k, v in self.second_moment.items()},
        )

    def checksum(self) -> str:
        h = hashlib.sha256(str(self.step_count).encode())
        for moments in (self.first_moment, self.second_moment):
            for k in sorted(moments):
                h.update(k.encode())
                h.update(np.ascontiguousarray(moments[k]).tobytes())
        return h.hexdigest()


def adam_step(params: ModelParams, grad: Grads, state: AdamState) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified.

    A non-finite gradient raises ``NumericError`` before anything is touched.
    """
    if grad.keys() != params.weights.keys() or grad.keys() != state.first_moment.keys():
        raise ShapeError("gradient, parameters and optimizer state disagree on keys")
    if not grads_finite(grad):
        raise NumericError("non-finite gradient; Adam step refused")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new = params.copy()
    m_new, v_new = {}, {}
    for k, g in grad.items():
        if g.shape != params.weights[k].shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, expected {params.weights[k].shape}")
        m = b1 * state.first_moment[k] + (1 - b1) * g
        v = b2 * state.second_moment[k] + (1 - b2) * (g * g)
        m_new[k], v_new[k] = m, v
        if state.lr != 0.0:
            new.weights[k] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new, AdamState(state.lr, b1, b2, state.eps, t, m_new, v_new)


def raw_step(params: ModelParams, grad: Grads, signed_scale: float) -> ModelParams:
    """``theta - signed_scale * grad`` without touching any optimizer state."""
    return apply_step(params, grad, signed_scale)


def preconditioned(grad: Grads, state: AdamState) -> Grads:
    """``grad`` scaled by the second-moment estimate Adam would hold after seeing it.

    Read-only: ``state`` is not advanced. Applying ``raw_step`` with this
    direction moves each coordinate by roughly the same amount an Adam step
    with the same learning rate would.
    """
    t = state.step_count + 1
    bc2 = 1.0 - state.beta2**t
    out = {}
    for k, g in grad.items():
        v = (state.beta2 * state.second_moment[k] + (1 - state.beta2) * (g * g)) / bc2
        out[k] = g / (np.sqrt(v) + state.eps)
    return out
