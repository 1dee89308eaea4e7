"""
Time CNN and Time CNN-GCN spike classifiers.

The Time CNN turns an (ns x 30) frame into a per-sensor feature matrix
Z (ns x 7) with five (conv -> batchnorm -> leaky ReLU) blocks, the first two
followed by (1 x 2) max pooling. Kernels are (1 x 5) so no information moves
between sensor rows. The plain model flattens Z (sensor-major) into the
decision block; the GCN variant treats each sensor as a graph node, runs three
graph convolutions over the geodesic sensor graph and sums node features
before the decision block.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .common import DegenerateGeometryError, InvalidArgumentError
from .optim import ones_init, xavier_init, zeros_init
from .signal import FRAME_SAMPLES
from .tensor import (
    BatchNormState,
    Function,
    Tensor,
    batchnorm,
    conv_time,
    dropout,
    leaky_relu,
    linear,
    maxpool_time,
    sigmoid,
)

TIMECNN = "timecnn"
TIMECNN_GCN = "timecnn-gcn"
MODEL_KINDS = (TIMECNN, TIMECNN_GCN)
PROBABILITY_CLAMP = 1e-7


# ---------------------------------------------------------------------------
# Sensor graph
# ---------------------------------------------------------------------------

@dataclass
class SensorGraph:
    """Symmetric edge weights in [0, 1] with unit self-loops"""
    adjacency: np.ndarray
    _normalized: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise InvalidArgumentError(f"sensor graph: adjacency must be square, got {a.shape}")
        if not np.array_equal(a, a.T):
            raise InvalidArgumentError("sensor graph: adjacency must be symmetric")
        if a.min() < 0 or a.max() > 1:
            raise InvalidArgumentError("sensor graph: weights must lie in [0, 1]")
        self.adjacency = a

    @property
    def n(self) -> int:
        return int(self.adjacency.shape[0])

    def normalized(self) -> np.ndarray:
        """D^-1/2 A D^-1/2 with D the row sums of the self-loop-augmented adjacency"""
        if self._normalized is None:
            inv_sqrt = 1.0 / np.sqrt(self.adjacency.sum(axis=1))
            self._normalized = inv_sqrt[:, None] * self.adjacency * inv_sqrt[None, :]
        return self._normalized

    def permuted(self, order) -> "SensorGraph":
        order = np.asarray(order)
        return SensorGraph(self.adjacency[np.ix_(order, order)])


def build_adjacency(distances: np.ndarray) -> SensorGraph:
    """A = 1 - min-max normalized geodesic distance off the diagonal, 1 on it"""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise InvalidArgumentError(f"build_adjacency: distances must be square, got {d.shape}")
    n = d.shape[0]
    if n == 1:
        return SensorGraph(np.ones((1, 1)))
    if not np.allclose(d, d.T, rtol=0, atol=1e-12) or np.any(np.diag(d) != 0):
        raise InvalidArgumentError("build_adjacency: distances must be symmetric with a zero diagonal")
    off_diagonal = d[~np.eye(n, dtype=bool)]
    if np.any(off_diagonal <= 0):
        raise InvalidArgumentError("build_adjacency: off-diagonal distances must be positive")

    d_min, d_max = off_diagonal.min(), off_diagonal.max()
    if d_max == d_min:
        if n >= 3:
            raise DegenerateGeometryError("build_adjacency: all sensor distances are equal")
        d_hat = np.zeros_like(d)
    else:
        d_hat = (d - d_min) / (d_max - d_min)
    a = np.clip(1.0 - d_hat, 0.0, 1.0)
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, 1.0)
    # Weights are stored as float32 in checkpoints; keep them exactly representable.
    return SensorGraph(a.astype(np.float32).astype(np.float64))


# ---------------------------------------------------------------------------
# Architecture descriptor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a Time CNN or Time CNN-GCN classifier"""
    kind: str
    ns: int
    nt: int = FRAME_SAMPLES
    conv_channels: Tuple[int, ...] = (32, 64, 128, 256, 1)
    pooled_blocks: int = 2
    gcn_dims: Tuple[int, ...] = (30, 128, 256)
    decision_dims: Tuple[int, ...] = (128, 64, 32, 1)
    dropout: float = 0.3
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise InvalidArgumentError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.ns < 1:
            raise InvalidArgumentError(f"model spec: ns must be positive, got {self.ns}")
        if self.nt != FRAME_SAMPLES:
            raise InvalidArgumentError(f"model spec: frames must have {FRAME_SAMPLES} time points, got {self.nt}")
        if not self.conv_channels or self.conv_channels[-1] != 1:
            raise InvalidArgumentError("model spec: the last convolution must have a single channel")
        if not self.decision_dims or self.decision_dims[-1] != 1:
            raise InvalidArgumentError("model spec: the decision block must end with one unit")
        if not 0 <= self.pooled_blocks <= len(self.conv_channels):
            raise InvalidArgumentError("model spec: pooled_blocks out of range")
        if not 0 <= self.dropout < 1:
            raise InvalidArgumentError("model spec: dropout must lie in [0, 1)")

    @property
    def nf(self) -> int:
        nf = self.nt
        for _ in range(self.pooled_blocks):
            nf //= 2
        return nf

    @property
    def uses_graph(self) -> bool:
        return self.kind == TIMECNN_GCN

    @property
    def decision_input(self) -> int:
        return self.gcn_dims[-1] if self.uses_graph else self.ns * self.nf

    def parameter_shapes(self) -> "OrderedDict[str, Tuple[int, ...]]":
        shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
        c_in = 1
        for i, c_out in enumerate(self.conv_channels, 1):
            shapes[f"conv{i}.weight"] = (c_out, c_in, 1, 5)
            shapes[f"conv{i}.bias"] = (c_out,)
            shapes[f"bn{i}.gamma"] = (c_out,)
            shapes[f"bn{i}.beta"] = (c_out,)
            c_in = c_out
        if self.uses_graph:
            f_in = self.nf
            for i, f_out in enumerate(self.gcn_dims, 1):
                shapes[f"gcn{i}.weight"] = (f_in, f_out)
                shapes[f"gcn{i}.bias"] = (f_out,)
                f_in = f_out
        n_in = self.decision_input
        for i, n_out in enumerate(self.decision_dims, 1):
            shapes[f"fc{i}.weight"] = (n_out, n_in)
            shapes[f"fc{i}.bias"] = (n_out,)
            n_in = n_out
        return shapes

    def buffer_shapes(self) -> "OrderedDict[str, Tuple[int, ...]]":
        shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
        for i, c in enumerate(self.conv_channels, 1):
            shapes[f"bn{i}.running_mean"] = (c,)
            shapes[f"bn{i}.running_var"] = (c,)
        return shapes

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.parameter_shapes().values()))

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization"""
        d = asdict(self)
        for key in ("conv_channels", "gcn_dims", "decision_dims"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InvalidArgumentError(f"model spec: unknown keys {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("conv_channels", "gcn_dims", "decision_dims"):
            if key in kwargs:
                kwargs[key] = tuple(int(v) for v in kwargs[key])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Graph ops
# ---------------------------------------------------------------------------

class GraphConv(Function):
    """H' = P H W + b for node features H of shape [B, ns, f_in] and fixed propagation P"""

    def forward(self, h, w, b, propagation=None):
        p = propagation.astype(h.dtype)
        ph = np.matmul(p, h)
        self.p, self.ph, self.w = p, ph, w
        return ph @ w + b

    def backward(self, grad):
        f_in, f_out = self.w.shape
        dw = (self.ph.reshape(-1, f_in).T @ grad.reshape(-1, f_out)) if self.needs_grad[1] else None
        db = grad.sum(axis=(0, 1)) if self.needs_grad[2] else None
        dh = np.matmul(self.p.T, grad @ self.w.T) if self.needs_grad[0] else None
        return dh, dw, db


def graph_conv(h: Tensor, weight: Tensor, bias: Tensor, graph: SensorGraph) -> Tensor:
    if h.values.ndim != 3 or h.shape[1] != graph.n:
        raise InvalidArgumentError(f"graph_conv: node features {h.shape} do not match a {graph.n}-node graph")
    if weight.shape[0] != h.shape[2] or bias.shape != (weight.shape[1],):
        raise InvalidArgumentError(f"graph_conv: weight {weight.shape} incompatible with features {h.shape}")
    return GraphConv.apply(h, weight, bias, propagation=graph.normalized())


def global_add_pool(h: Tensor) -> Tensor:
    """Sum node features over nodes: [B, ns, f] -> [B, f]"""
    return h.sum(axis=1)


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

def _as_tensor(x: Union[Tensor, np.ndarray]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


class SpikeClassifier:
    """Parameters, batchnorm running statistics and the forward pass of one model"""

    def __init__(self, spec: ModelSpec, params: Mapping[str, Tensor],
                 bn_states: Mapping[str, BatchNormState]):
        expected = spec.parameter_shapes()
        if list(params) != list(expected):
            raise InvalidArgumentError(f"{spec.kind}: parameter names do not match the architecture")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise InvalidArgumentError(f"{spec.kind}: {name} has shape {params[name].shape}, expected {shape}")
        n_blocks = len(spec.conv_channels)
        if sorted(bn_states) != sorted(f"bn{i}" for i in range(1, n_blocks + 1)):
            raise InvalidArgumentError(f"{spec.kind}: batchnorm states do not match the architecture")
        assert expected["fc1.weight"][1] == spec.decision_input
        assert spec.decision_input == (spec.gcn_dims[-1] if spec.uses_graph else spec.ns * spec.nf)

        self.spec = spec
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(params)
        self.bn_states: Dict[str, BatchNormState] = dict(bn_states)
        for name, tensor in self.params.items():
            tensor.requires_grad = True
            tensor.name = name

    @classmethod
    def build(cls, spec: ModelSpec, rng: np.random.Generator, dtype=np.float32) -> "SpikeClassifier":
        """Xavier-uniform weights, zero biases, unit batchnorm scale"""
        params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape in spec.parameter_shapes().items():
            if name.endswith(".gamma"):
                params[name] = ones_init(shape, dtype)
            elif name.endswith(".weight"):
                if name.startswith("conv"):
                    fan_in, fan_out = shape[1] * shape[3], shape[0] * shape[3]
                elif name.startswith("gcn"):
                    fan_in, fan_out = shape[0], shape[1]
                else:
                    fan_in, fan_out = shape[1], shape[0]
                params[name] = xavier_init(shape, fan_in, fan_out, rng, dtype)
            else:
                params[name] = zeros_init(shape, dtype)
        bn_states = {f"bn{i}": BatchNormState.fresh(c, dtype) for i, c in enumerate(spec.conv_channels, 1)}
        return cls(spec, params, bn_states)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- state --------------------------------------------------------------

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Copies of every parameter followed by every batchnorm running statistic"""
        arrays: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (name, p.values.copy()) for name, p in self.params.items())
        for i in range(1, len(self.spec.conv_channels) + 1):
            state = self.bn_states[f"bn{i}"]
            arrays[f"bn{i}.running_mean"] = state.running_mean.copy()
            arrays[f"bn{i}.running_var"] = state.running_var.copy()
        return arrays

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]):
        for name, p in self.params.items():
            p.values = np.array(arrays[name], dtype=p.dtype, copy=True)
        for key, state in self.bn_states.items():
            state.running_mean = np.array(arrays[f"{key}.running_mean"], dtype=np.float32, copy=True)
            state.running_var = np.array(arrays[f"{key}.running_var"], dtype=np.float32, copy=True)

    @classmethod
    def from_state_arrays(cls, spec: ModelSpec, arrays: Mapping[str, np.ndarray]) -> "SpikeClassifier":
        params = OrderedDict(
            (name, Tensor(np.array(arrays[name], dtype=np.float32, copy=True), requires_grad=True))
            for name in spec.parameter_shapes())
        bn_states = {
            f"bn{i}": BatchNormState(np.array(arrays[f"bn{i}.running_mean"], dtype=np.float32, copy=True),
                                     np.array(arrays[f"bn{i}.running_var"], dtype=np.float32, copy=True))
            for i in range(1, len(spec.conv_channels) + 1)
        }
        return cls(spec, params, bn_states)

    def astype(self, dtype) -> "SpikeClassifier":
        """Independent copy with parameters and running statistics cast to `dtype`"""
        params = OrderedDict((name, p.astype(dtype)) for name, p in self.params.items())
        bn_states = {}
        for key, state in self.bn_states.items():
            copy = state.copy()
            copy.running_mean = copy.running_mean.astype(dtype)
            copy.running_var = copy.running_var.astype(dtype)
            bn_states[key] = copy
        return SpikeClassifier(self.spec, params, bn_states)

    # -- forward ------------------------------------------------------------

    def _check_frames(self, x: Tensor):
        if x.values.ndim != 3 or x.shape[1:] != (self.spec.ns, self.spec.nt):
            raise InvalidArgumentError(
                f"{self.spec.kind}: expected frames [B,{self.spec.ns},{self.spec.nt}], got {x.shape}")

    def features(self, x: Tensor, train: bool = False) -> Tensor:
        """[B, ns, nt] -> Z of shape [B, ns, nf]"""
        self._check_frames(x)
        spec, p = self.spec, self.params
        batch = x.shape[0]
        h = x.reshape(batch, 1, spec.ns, spec.nt)
        for i in range(1, len(spec.conv_channels) + 1):
            h = conv_time(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
            h = batchnorm(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.bn_states[f"bn{i}"], train)
            h = leaky_relu(h, spec.leaky_slope)
            if i <= spec.pooled_blocks:
                h = maxpool_time(h)
        return h.reshape(batch, spec.ns, spec.nf)

    def embed(self, z: Tensor, graph: SensorGraph) -> Tensor:
        """Three graph convolutions then global add pooling: [B, ns, nf] -> [B, 256]"""
        if graph.n != self.spec.ns:
            raise InvalidArgumentError(f"graph has {graph.n} nodes, model expects {self.spec.ns} sensors")
        h = z
        for i in range(1, len(self.spec.gcn_dims) + 1):
            h = graph_conv(h, self.params[f"gcn{i}.weight"], self.params[f"gcn{i}.bias"], graph)
            h = leaky_relu(h, self.spec.leaky_slope)
        return global_add_pool(h)

    def decide(self, h: Tensor, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Fully connected decision block: [B, decision_input] -> probabilities [B]"""
        if h.values.ndim != 2 or h.shape[1] != self.spec.decision_input:
            raise InvalidArgumentError(
                f"decision block expects {self.spec.decision_input} features, got shape {h.shape}")
        n_layers = len(self.spec.decision_dims)
        for i in range(1, n_layers + 1):
            h = linear(h, self.params[f"fc{i}.weight"], self.params[f"fc{i}.bias"])
            if i < n_layers:
                h = leaky_relu(h, self.spec.leaky_slope)
                h = dropout(h, self.spec.dropout, train, rng)
        return sigmoid(h).reshape(h.shape[0])

    def forward(self, x: Union[Tensor, np.ndarray], graph: Optional[SensorGraph] = None,
                train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        x = _as_tensor(x)
        if self.spec.uses_graph and graph is None:
            raise InvalidArgumentError("timecnn-gcn requires a sensor graph")
        z = self.features(x, train)
        if self.spec.uses_graph:
            h = self.embed(z, graph)
        else:
            h = z.reshape(z.shape[0], self.spec.ns * self.spec.nf)
        return self.decide(h, train, rng)

    def predict_proba(self, frames: np.ndarray, graph: Optional[SensorGraph] = None,
                      batch_size: int = 256) -> np.ndarray:
        """Eval-mode spike probabilities for [n, ns, nt] frames, clamped into (0, 1)"""
        frames = np.asarray(frames)
        if frames.ndim == 2:
            frames = frames[None]
        out = np.empty(frames.shape[0], dtype=np.float64)
        for start in range(0, frames.shape[0], batch_size):
            chunk = np.asarray(frames[start:start + batch_size], dtype=self.params["fc1.weight"].dtype)
            out[start:start + chunk.shape[0]] = self.forward(Tensor(chunk), graph, train=False).values
        return np.clip(out, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)


# ---------------------------------------------------------------------------
# Single-frame entry points
# ---------------------------------------------------------------------------

def _batched(frame: Union[Tensor, np.ndarray]) -> Tuple[Tensor, bool]:
    t = _as_tensor(frame)
    if t.values.ndim == 2:
        return t.reshape(1, *t.shape), True
    return t, False


def timecnn_features(frame: Union[Tensor, np.ndarray], model: SpikeClassifier, train: bool = False) -> Tensor:
    """Z (ns x 7) for one frame, or [B, ns, 7] for a batch"""
    x, single = _batched(frame)
    z = model.features(x, train)
    return z.reshape(*z.shape[1:]) if single else z


def gcn_forward(z: Union[Tensor, np.ndarray], graph: SensorGraph, model: SpikeClassifier) -> Tensor:
    """Length-256 graph embedding of Z (or [B, 256] for a batch)"""
    t, single = _batched(z)
    if t.shape[1] != graph.n:
        raise InvalidArgumentError(f"gcn_forward: Z has {t.shape[1]} rows, graph has {graph.n} nodes")
    out = model.embed(t, graph)
    return out.reshape(out.shape[1]) if single else out


def decision_block(features: Union[Tensor, np.ndarray], model: SpikeClassifier, train: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    t = _as_tensor(features)
    single = t.values.ndim == 1
    if single:
        t = t.reshape(1, t.shape[0])
    out = model.decide(t, train, rng)
    return out.reshape(()) if single else out


def predict(frame: np.ndarray, model: SpikeClassifier, graph: Optional[SensorGraph] = None) -> float:
    """Eval-mode spike probability of a single ns x 30 frame"""
    if model.spec.uses_graph and graph is None:
        raise InvalidArgumentError("predict: timecnn-gcn requires a sensor graph")
    return float(model.predict_proba(np.asarray(frame)[None] if np.ndim(frame) == 2 else frame, graph)[0])
