"""Adam optimizer with bias correction, plus the bare per-buffer update rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import Tensor


class OptimizerError(RuntimeError):
    pass


@dataclass
class AdamState:
    """First/second-moment buffers and step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_shape(cls, shape, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state``, returns the new param."""
    if lr <= 0:
        raise OptimizerError(f"learning rate must be positive, got {lr}")
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise OptimizerError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return param - lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Adam over a list of ``Tensor`` leaves; ``step()`` consumes ``.grad``."""

    def __init__(self, params: Iterable[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params]
        self.lr = lr
        self.states = [AdamState.for_shape(p.shape, beta1, beta2, eps) for p in self.params]

    def step(self) -> None:
        for p, st in zip(self.params, self.states):
            if p.grad is None:
                continue
            if not np.isfinite(p.grad).all():
                raise OptimizerError(f"non-finite gradient for parameter {p.name or '<unnamed>'}")
            p.data = adam_step(p.data, p.grad, st, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
