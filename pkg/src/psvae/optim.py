"""Adam optimizer with bias correction and an exponential-decay LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError


@dataclass
class LrSchedule:
    """Exponentially decaying learning rate.

    Rate at step t is ``initial_rate * decay_factor ** (t / decay_steps)``;
    the exponent is floored when ``staircase`` is set.
    """

    initial_rate: float = 1e-3
    decay_factor: float = 0.9
    decay_steps: int = 1000
    staircase: bool = False

    def __post_init__(self):
        if self.initial_rate <= 0:
            raise ContractError("initial_rate must be positive")
        if self.decay_steps < 1:
            raise ContractError("decay_steps must be >= 1")


def lr_at(schedule, t):
    """Learning rate emitted by ``schedule`` at step ``t`` (t >= 0)."""
    if t < 0:
        raise ContractError(f"step must be non-negative, got {t}")
    e = t / schedule.decay_steps
    if schedule.staircase:
        e = float(int(e))
    return schedule.initial_rate * schedule.decay_factor**e


@dataclass
class AdamState:
    """First/second moment accumulators and step counter for one parameter set."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    slots: dict = field(default_factory=dict)  # name -> (m, v)

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.slots[name] = (
                np.zeros_like(p.data),
                np.zeros_like(p.data),
            )
        return state


def adam_step(params, state, lr):
    """One bias-corrected Adam update over a named parameter dict.

    Aborts without touching parameters or state if any gradient is
    non-finite. Parameters whose ``grad`` is None are treated as zero-grad.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        if not np.isfinite(np.sum(g)) and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}; step aborted")
        grads[name] = g

    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        m, v = state.slots[name]
        g = grads[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.slots[name] = (m, v)
        m_hat = m / c1
        v_hat = v / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
