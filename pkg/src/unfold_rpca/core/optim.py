"""Adam optimizer and the poly learning-rate schedule."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def poly_lr(base_lr: float, iteration: int, total_iter: int, power: float = 0.9) -> float:
    """``base_lr * (1 - iteration / total_iter) ** power``; past the end the rate is 0."""
    if total_iter <= 0:
        raise ValueError(f"total_iter must be positive, got {total_iter}")
    if iteration < 0:
        raise ValueError(f"iteration must be non-negative, got {iteration}")
    if iteration > total_iter:
        warnings.warn(
            f"poly_lr: iteration {iteration} exceeds total_iter {total_iter}; clamping lr to 0",
            RuntimeWarning,
            stacklevel=2,
        )
        return 0.0
    return base_lr * (1.0 - iteration / total_iter) ** power


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    base_lr: float = 1e-4


class MissingGradientError(RuntimeError):
    pass


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float | None = None) -> None:
    """
    One bias-corrected Adam update over ``params`` (name -> leaf tensor).

    Gradients are zeroed after the update. A parameter whose ``grad`` was
    never populated raises ``MissingGradientError`` before anything changes.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for parameters: {', '.join(missing[:5])}")
    lr = state.base_lr if lr is None else lr
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        g.fill(0.0)
