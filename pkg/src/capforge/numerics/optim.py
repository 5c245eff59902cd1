"""Adam with bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from capforge.errors import ContractError
from capforge.numerics.tensor import Tensor

DEFAULT_LR = 2e-4


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_step(state: AdamState, param: Tensor) -> None:
    if param.grad is None:
        raise ContractError(f"adam_step: parameter {param.name or param!r} has no gradient")
    g = param.grad
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class Adam:
    """One :class:`AdamState` per parameter, stepped together."""

    params: list[Tensor]
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        hyper = dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        self.states = [AdamState.for_param(p, **hyper) for p in self.params]

    def step(self) -> None:
        for state, p in zip(self.states, self.params):
            adam_step(state, p)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
