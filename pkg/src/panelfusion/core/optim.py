"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, **kw) -> "AdamState":
        return cls(np.zeros(param.size, dtype=np.float64), np.zeros(param.size, dtype=np.float64), **kw)


def adam_step(param: Tensor, state: AdamState, lr: float) -> None:
    """One in-place Adam update; zeroes ``param.grad`` afterwards."""
    if param.grad is None:
        raise ContractError("adam_step on a parameter without a gradient")
    if state.m.size != param.size:
        raise ContractError(f"AdamState size {state.m.size} does not match parameter size {param.size}")
    g = param.grad.reshape(-1).astype(np.float64)
    state.step_count += 1
    k = state.step_count
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1**k)
    vhat = state.v / (1.0 - state.beta2**k)
    update = lr * mhat / (np.sqrt(vhat) + state.eps)
    param.data = (param.data.reshape(-1) - update).astype(param.dtype).reshape(param.shape)
    param.grad = np.zeros_like(param.data)


@dataclass
class Adam:
    """Named collection of Adam states over a dict of parameters."""

    params: dict[str, Tensor]
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.states.setdefault(name, AdamState.for_param(p))

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            adam_step(p, self.states[name], lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
