"""AdamW with decoupled weight decay, plus a helper for dicts of parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NonFiniteError

__all__ = ["AdamState", "init_adam_state", "adamw_step", "TreeAdamW", "DivergenceError"]


class DivergenceError(RuntimeError):
    """A training loop produced a non-finite or runaway loss."""


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def init_adam_state(theta) -> AdamState:
    theta = np.asarray(theta)
    return AdamState(np.zeros_like(theta, dtype=np.float64), np.zeros_like(theta, dtype=np.float64), 0)


def adamw_step(
    theta,
    grad,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
):
    """One update: bias-corrected moment estimates, decay applied to theta directly.

        m' = b1 m + (1-b1) g          v' = b2 v + (1-b2) g^2
        theta' = theta (1 - lr wd) - lr * (m'/(1-b1^t)) / (sqrt(v'/(1-b2^t)) + eps)

    Returns (new_theta, new_state); inputs are never mutated. A non-finite
    gradient rejects the step.
    """
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}, m {state.m.shape}")
    if not np.isfinite(grad).all():
        raise NonFiniteError("step rejected: gradient contains NaN or Inf")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_theta = theta * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_theta, AdamState(m, v, t)


class TreeAdamW:
    """AdamW over a dict of named parameter arrays.

    Keeps one AdamState per path, created lazily, so the same instance can
    drive any subset of a model's parameters.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.states: dict[str, AdamState] = {}

    def step(self, params: dict, grads: dict) -> dict:
        """Update every path present in ``grads``; returns a new params dict."""
        out = dict(params)
        for path in sorted(grads):
            state = self.states.get(path)
            if state is None:
                state = init_adam_state(params[path])
            out[path], self.states[path] = adamw_step(
                params[path], grads[path], state,
                self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
            )
        return out
