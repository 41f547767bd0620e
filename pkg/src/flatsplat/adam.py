"""Adam moment tracking and bias-corrected preconditioning for one parameter block."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m1: np.ndarray
    m2: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, shape, beta1=0.9, beta2=0.999, eps_hat=1e-8):
        return cls(np.zeros(shape), np.zeros(shape), 0, beta1, beta2, eps_hat)

    def append_rows(self, k):
        """Extend along axis 0 with zero moments for k new rows."""
        pad = np.zeros((k,) + self.m1.shape[1:])
        self.m1 = np.concatenate([self.m1, pad])
        self.m2 = np.concatenate([self.m2, pad.copy()])

    def reset_rows(self, indices):
        self.m1[indices] = 0.0
        self.m2[indices] = 0.0


def adam_precondition(grad, state: AdamState, lr_scale: float = 1.0):
    """Advance the moments one step and return the bias-corrected direction
    m_hat / (sqrt(v_hat) + eps)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m1.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match state {state.m1.shape}")
    state.step += 1
    state.m1 = state.beta1 * state.m1 + (1.0 - state.beta1) * grad
    state.m2 = state.beta2 * state.m2 + (1.0 - state.beta2) * grad * grad
    m_hat = state.m1 / (1.0 - state.beta1**state.step)
    v_hat = state.m2 / (1.0 - state.beta2**state.step)
    direction = m_hat / (np.sqrt(v_hat) + state.eps_hat)
    if lr_scale != 1.0:
        direction = direction * lr_scale
    return direction
