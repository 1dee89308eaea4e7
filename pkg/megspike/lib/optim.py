"""
Adam optimizer and Xavier initialization for megspike tensors.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np

from .common import InvalidArgumentError
from .tensor import Tensor

ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    """Bias-corrected Adam moments, keyed by parameter name"""
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def _values(param: Union[Tensor, np.ndarray]) -> np.ndarray:
    return param.values if isinstance(param, Tensor) else param


def adam_step(params: Mapping[str, Union[Tensor, np.ndarray]],
              grads: Mapping[str, Optional[np.ndarray]],
              state: AdamState) -> AdamState:
    """
    Apply one Adam update in place.

    Parameters without an entry in `grads` are updated with a zero gradient.
    Every shape is validated before anything is modified, so a failed call
    leaves params and state untouched.
    """
    prepared = []
    for name, param in params.items():
        values = _values(param)
        grad = grads.get(name)
        grad = np.zeros_like(values) if grad is None else np.asarray(grad, dtype=values.dtype)
        if grad.shape != values.shape:
            raise InvalidArgumentError(f"adam_step: gradient for {name} has shape {grad.shape}, expected {values.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is not None and (m.shape != values.shape or v is None or v.shape != values.shape):
            raise InvalidArgumentError(f"adam_step: optimizer moments for {name} do not match shape {values.shape}")
        prepared.append((name, values, grad, m, v))

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    for name, values, grad, m, v in prepared:
        if m is None:
            m = np.zeros_like(values)
            v = np.zeros_like(values)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        values -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(values.dtype)
        state.m[name] = m
        state.v[name] = v
    return state


class Adam:
    """Adam over a named set of tensors, reading gradients from `.grad`"""

    def __init__(self, params: Mapping[str, Tensor], lr: float = ADAM_LR,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        """Update the tensors holding a gradient; the others and their moments are left alone"""
        active = {name: p for name, p in self.params.items() if p.grad is not None}
        if active:
            adam_step(active, {name: p.grad for name, p in active.items()}, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape: Sequence[int], fan_in: int, fan_out: int,
                rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Xavier (Glorot) uniform weights on [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]"""
    if fan_in < 1 or fan_out < 1:
        raise InvalidArgumentError(f"xavier_init: fans must be positive, got {fan_in}, {fan_out}")
    bound = xavier_bound(fan_in, fan_out)
    values = rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)
    return Tensor(values, requires_grad=True)


def zeros_init(shape: Sequence[int], dtype=np.float32) -> Tensor:
    """Zero-initialized trainable tensor (biases)"""
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=True)


def ones_init(shape: Sequence[int], dtype=np.float32) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype), requires_grad=True)
