"""
Dense reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 by default, float64 is preserved so
gradients can be checked against finite differences). Each differentiable
operation is a ``Function`` subclass: ``apply`` runs ``forward`` on the raw
arrays and, when any input requires a gradient, records the function as the
creator of the output. ``backward`` walks the recorded graph in reverse
topological order, accumulates gradients on leaf tensors and releases the
graph.

The op set is exactly what the Time CNN and Time CNN-GCN classifiers need:
``conv_time``, ``batchnorm``, ``leaky_relu``, ``maxpool_time``, ``linear``,
``sigmoid``, ``dropout`` and ``bce_loss``, plus the structural helpers
(``sum``, ``reshape``, elementwise ``add``/``mul``). Graph propagation lives
in ``megspike.lib.models``.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .common import InvalidArgumentError, InvalidStateError

_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))

KERNEL_WIDTH = 5
LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLAMP = 1e-7


def _as_array(values: Any) -> np.ndarray:
    if isinstance(values, (np.ndarray, np.generic)):
        arr = np.asarray(values)
        if arr.dtype in _FLOAT_TYPES:
            return arr
    return np.asarray(values, dtype=np.float32)


class Tensor:
    """Dense row-major tensor with an optional gradient buffer"""

    def __init__(self, values: Any, requires_grad: bool = False,
                 creator: Optional["Function"] = None, name: Optional[str] = None):
        self.values = _as_array(values)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.creator = creator
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise InvalidArgumentError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def astype(self, dtype) -> "Tensor":
        """New leaf tensor holding a copy of the values in `dtype`"""
        return Tensor(self.values.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> "Tensor":
        return Sum.apply(self, axis=axis)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=like.dtype)
    if arr.shape != like.shape:
        arr = np.broadcast_to(arr, like.shape).copy()
    return Tensor(arr)


class Function:
    """
    Base class for differentiable operations.

    ``forward`` receives the raw arrays of the input tensors (and keyword
    options) and returns the output array. ``backward`` receives dL/d(output)
    and returns one entry per input: dL/d(input), or None where no gradient is
    needed.
    """

    def __init__(self, *tensors: Tensor):
        self.tensors = tensors
        self.needs_grad = tuple(t.requires_grad for t in tensors)

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        func = cls(*tensors)
        out = func.forward(*(t.values for t in tensors), **kwargs)
        requires_grad = any(func.needs_grad)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.tensors:
                if id(parent) not in visited:
                    stack.append((parent, False))
    return order


def _accumulate(leaf: Tensor, grad: np.ndarray):
    grad = np.asarray(grad, dtype=leaf.dtype)
    if leaf.grad is None:
        leaf.grad = grad.copy()
    else:
        leaf.grad = leaf.grad + grad


def backward(loss: Tensor):
    """Populate `.grad` on every leaf tensor that requires a gradient, then release the graph"""
    if loss.creator is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.values))
        return

    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        func = node.creator
        if func is None:
            if node.requires_grad:
                _accumulate(node, grad)
            continue
        for parent, needed, parent_grad in zip(func.tensors, func.needs_grad, func.backward(grad)):
            if not needed or parent_grad is None:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    for node in order:
        node.creator = None


# ---------------------------------------------------------------------------
# Structural helpers
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise InvalidArgumentError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise InvalidArgumentError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Sum(Function):
    def forward(self, x, axis=None):
        self.input_shape = x.shape
        self.axis = axis
        return np.asarray(x.sum(axis=axis), dtype=x.dtype)

    def backward(self, grad):
        if self.axis is None:
            return (np.broadcast_to(grad, self.input_shape).copy(),)
        expanded = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(expanded, self.input_shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape=()):
        self.input_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as e:
            raise InvalidArgumentError(f"reshape: cannot view {x.shape} as {shape}") from e

    def backward(self, grad):
        return (grad.reshape(self.input_shape),)


# ---------------------------------------------------------------------------
# Layer ops
# ---------------------------------------------------------------------------

class ConvTime(Function):
    """Per-sensor temporal convolution, kernel (1 x k), zero padding k//2 on each time edge"""

    def forward(self, x, w, b):
        self.unbatched = x.ndim == 3
        if self.unbatched:
            x = x[None]
        batch, c_in, ns, nt = x.shape
        c_out, _, _, width = w.shape
        pad = width // 2

        xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (pad, pad)))
        cols = sliding_window_view(xp, width, axis=3)
        cols = cols.transpose(0, 2, 3, 1, 4).reshape(batch * ns * nt, c_in * width)
        w2 = w.reshape(c_out, c_in * width)

        out = (cols @ w2.T).reshape(batch, ns, nt, c_out).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out + b[None, :, None, None])

        self.cols, self.w2 = cols, w2
        self.dims = (batch, c_in, ns, nt, c_out, width, pad)
        self.w_shape = w.shape
        return out[0] if self.unbatched else out

    def backward(self, grad):
        batch, c_in, ns, nt, c_out, width, pad = self.dims
        g4 = grad[None] if self.unbatched else grad
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)

        dw = (g2.T @ self.cols).reshape(self.w_shape) if self.needs_grad[1] else None
        db = g4.sum(axis=(0, 2, 3)) if self.needs_grad[2] else None

        dx = None
        if self.needs_grad[0]:
            dcols = (g2 @ self.w2).reshape(batch, ns, nt, c_in, width).transpose(0, 3, 1, 2, 4)
            dxp = np.zeros((batch, c_in, ns, nt + 2 * pad), dtype=grad.dtype)
            for j in range(width):
                dxp[..., j:j + nt] += dcols[..., j]
            dx = dxp[..., pad:pad + nt]
            if self.unbatched:
                dx = dx[0]
        return dx, dw, db


def conv_time(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-length (1 x 5) convolution over time, independently for every sensor row"""
    if x.values.ndim not in (3, 4):
        raise InvalidArgumentError(f"conv_time: expected [C,ns,nt] or [B,C,ns,nt], got {x.shape}")
    c_in = x.shape[-3]
    if x.shape[-1] < 1:
        raise InvalidArgumentError("conv_time: nt must be at least 1")
    if kernels.values.ndim != 4 or kernels.shape[1] != c_in or kernels.shape[2] != 1 \
            or kernels.shape[3] != KERNEL_WIDTH:
        raise InvalidArgumentError(
            f"conv_time: kernels {kernels.shape} incompatible with {c_in} input channels "
            f"(expected [C_out,{c_in},1,{KERNEL_WIDTH}])")
    if bias.shape != (kernels.shape[0],):
        raise InvalidArgumentError(f"conv_time: bias {bias.shape} does not match {kernels.shape[0]} output channels")
    return ConvTime.apply(x, kernels, bias)


@dataclass
class BatchNormState:
    """Per-channel running statistics; None until initialized"""
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None and self.running_var is not None

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray):
        if not self.initialized:
            self.running_mean = batch_mean.copy()
            self.running_var = batch_var_unbiased.copy()
            return
        dtype = self.running_mean.dtype
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * batch_mean).astype(dtype)
        self.running_var = ((1 - m) * self.running_var + m * batch_var_unbiased).astype(dtype)

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            None if self.running_mean is None else self.running_mean.copy(),
            None if self.running_var is None else self.running_var.copy(),
            self.momentum, self.eps)


class BatchNorm(Function):
    def forward(self, x, gamma, beta, state: BatchNormState = None, train: bool = True):
        axes = (0,) + tuple(range(2, x.ndim))
        shape = [1] * x.ndim
        shape[1] = x.shape[1]
        eps = x.dtype.type(state.eps)

        if train:
            n = x.size // x.shape[1]
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            state.update(mean, var * (n / (n - 1)))
        else:
            mean = state.running_mean.astype(x.dtype)
            var = state.running_var.astype(x.dtype)

        inv_std = (1.0 / np.sqrt(var + eps)).reshape(shape)
        xhat = (x - mean.reshape(shape)) * inv_std
        self.axes, self.shape, self.train = axes, shape, train
        self.xhat, self.inv_std, self.gamma = xhat, inv_std, gamma
        return gamma.reshape(shape) * xhat + beta.reshape(shape)

    def backward(self, grad):
        axes, shape = self.axes, self.shape
        dgamma = (grad * self.xhat).sum(axis=axes) if self.needs_grad[1] else None
        dbeta = grad.sum(axis=axes) if self.needs_grad[2] else None

        dx = None
        if self.needs_grad[0]:
            dxhat = grad * self.gamma.reshape(shape)
            if self.train:
                n = grad.size // grad.shape[1]
                dx = (self.inv_std / n) * (
                    n * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - self.xhat * (dxhat * self.xhat).sum(axis=axes, keepdims=True))
            else:
                dx = dxhat * self.inv_std
        return dx, dgamma, dbeta


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel batch normalization over every axis but the channel axis (1)"""
    if x.values.ndim < 2:
        raise InvalidArgumentError(f"batchnorm: expected at least [B,C], got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise InvalidArgumentError(f"batchnorm: gamma/beta must have shape ({channels},)")
    if state.eps <= 0:
        raise InvalidArgumentError("batchnorm: eps must be positive")
    if train:
        if x.size // channels < 2:
            raise InvalidArgumentError("batchnorm: train mode needs at least 2 elements per channel")
    elif not state.initialized:
        raise InvalidStateError("batchnorm: eval mode with uninitialized running statistics")
    return BatchNorm.apply(x, gamma, beta, state=state, train=train)


class LeakyReLU(Function):
    def forward(self, x, slope=LEAKY_SLOPE):
        self.positive = x >= 0
        self.slope = x.dtype.type(slope)
        return np.where(self.positive, x, self.slope * x)

    def backward(self, grad):
        return (np.where(self.positive, grad, self.slope * grad),)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not np.isfinite(slope):
        raise InvalidArgumentError("leaky_relu: slope must be finite")
    return LeakyReLU.apply(x, slope=slope)


class MaxPoolTime(Function):
    def forward(self, x):
        nt = x.shape[-1]
        half = nt // 2
        pairs = x[..., :2 * half].reshape(x.shape[:-1] + (half, 2))
        self.index = pairs.argmax(axis=-1)[..., None]
        self.input_shape, self.half = x.shape, half
        return np.take_along_axis(pairs, self.index, axis=-1)[..., 0]

    def backward(self, grad):
        half = self.half
        dpairs = np.zeros(self.input_shape[:-1] + (half, 2), dtype=grad.dtype)
        np.put_along_axis(dpairs, self.index, grad[..., None], axis=-1)
        dx = np.zeros(self.input_shape, dtype=grad.dtype)
        dx[..., :2 * half] = dpairs.reshape(self.input_shape[:-1] + (2 * half,))
        return (dx,)


def maxpool_time(x: Tensor) -> Tensor:
    """(1 x 2) max pooling with stride 2 along time; an odd trailing sample is dropped"""
    if x.values.ndim < 1 or x.shape[-1] < 2:
        raise InvalidArgumentError(f"maxpool_time: need at least 2 time samples, got shape {x.shape}")
    return MaxPoolTime.apply(x)


class Linear(Function):
    def forward(self, x, w, b):
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, grad):
        dx = grad @ self.w if self.needs_grad[0] else None
        dw = grad.T @ self.x if self.needs_grad[1] else None
        db = grad.sum(axis=0) if self.needs_grad[2] else None
        return dx, dw, db


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x W^T + b for x of shape [B, n_in]"""
    if x.values.ndim != 2 or weight.values.ndim != 2:
        raise InvalidArgumentError(f"linear: expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise InvalidArgumentError(f"linear: input width {x.shape[1]} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise InvalidArgumentError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    return Linear.apply(x, weight, bias)


class Sigmoid(Function):
    def forward(self, x):
        out = np.empty_like(x)
        positive = x >= 0
        out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
        ex = np.exp(x[~positive])
        out[~positive] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


class Dropout(Function):
    def forward(self, x, mask=None):
        self.mask = mask
        return x * mask

    def backward(self, grad):
        return (grad * self.mask,)


def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) in train mode, identity in eval mode"""
    if not 0 <= p < 1:
        raise InvalidArgumentError(f"dropout: p must lie in [0, 1), got {p}")
    if not train or p == 0:
        return x
    if rng is None:
        raise InvalidArgumentError("dropout: a random generator is required in train mode")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return Dropout.apply(x, mask=mask)


class BCELoss(Function):
    def forward(self, prob, label=None):
        raw = prob.astype(np.float64)
        p = np.clip(raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
        y = label.astype(np.float64)
        self.p, self.y, self.dtype = p, y, prob.dtype
        # clamped probabilities pass no gradient
        self.inside = (raw >= BCE_CLAMP) & (raw <= 1.0 - BCE_CLAMP)
        loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean()
        return np.asarray(loss, dtype=prob.dtype)

    def backward(self, grad):
        n = self.p.size
        dp = (-(self.y / self.p) + (1.0 - self.y) / (1.0 - self.p)) / n * self.inside
        return ((np.asarray(grad, dtype=np.float64) * dp).astype(self.dtype),)


def bce_loss(prob: Tensor, label: Union[Tensor, np.ndarray, Sequence[int]]) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1-1e-7]"""
    y = label.values if isinstance(label, Tensor) else np.asarray(label)
    if y.shape != prob.shape:
        raise InvalidArgumentError(f"bce_loss: labels {y.shape} do not match probabilities {prob.shape}")
    if not np.isin(y, (0, 1)).all():
        raise InvalidArgumentError("bce_loss: labels must be 0 or 1")
    return BCELoss.apply(prob, label=y)
