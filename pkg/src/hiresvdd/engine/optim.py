from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidStep, MissingGradient
from .core import AdamState, ParamStore


@dataclass(frozen=True)
class TrainSchedule:
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    total_steps: int = 1
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")


def cosine_lr(step: int, schedule: TrainSchedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise InvalidStep(f"step {step} outside [0, {schedule.total_steps}]")
    frac = step / schedule.total_steps
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * frac))


def adamw_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float, schedule: TrainSchedule) -> ParamStore:
    """One in-place AdamW update; weight decay is applied separately from the Adam step."""
    missing = [name for name in store if name not in grads or grads[name] is None]
    if missing:
        raise MissingGradient(f"no gradient for {missing}")
    b1, b2 = schedule.beta1, schedule.beta2
    for name, param in store.items():
        g = grads[name]
        st = store.state.get(name)
        if st is None:
            st = store.state[name] = AdamState(np.zeros_like(param.value), np.zeros_like(param.value))
        st.step += 1
        st.m = b1 * st.m + (1.0 - b1) * g
        st.v = b2 * st.v + (1.0 - b2) * (g * g)
        m_hat = st.m / (1.0 - b1**st.step)
        v_hat = st.v / (1.0 - b2**st.step)
        theta = param.value
        if schedule.weight_decay:
            theta = theta - lr * schedule.weight_decay * theta
        param.value = (theta - lr * m_hat / (np.sqrt(v_hat) + schedule.eps_adam)).astype(param.value.dtype, copy=False)
    return store
