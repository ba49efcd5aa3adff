"""
Minimal reverse-mode differentiation over static graphs of float64 numpy tensors.

A `Graph` is a named DAG of layers. `forward` evaluates it and keeps per-node caches,
`backward` propagates a gradient from any node back to all parameters and inputs.
Image tensors use NCHW layout.
"""

import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import yaml

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class GraphError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def kaiming_normal(rng: np.random.Generator, shape: tuple, fan_in: int, scale: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), size=shape)


class Layer:
    """
    Base layer. `forward` returns (output, cache); `backward` maps the output gradient to
    (input gradients, parameter gradients).
    """

    n_inputs = 1

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {}

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, cache, grad):
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, padding: int = 1, stride: int = 1, rng: Optional[np.random.Generator] = None, init_scale: float = 1.0):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.padding, self.stride = kernel_size, padding, stride
        self.init_scale = init_scale
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.params["weight"] = kaiming_normal(rng, shape, fan_in, init_scale) if rng is not None else np.zeros(shape)
        self.params["bias"] = np.zeros(out_channels)

    def config(self) -> dict:
        return dict(in_channels=self.in_channels, out_channels=self.out_channels, kernel_size=self.kernel_size, padding=self.padding, stride=self.stride, init_scale=self.init_scale)

    def _out_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel_size) // self.stride + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W), got {x.shape}")
        p, s, k = self.padding, self.stride, self.kernel_size
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        H, W = self._out_size(x.shape[2]), self._out_size(x.shape[3])
        w = self.params["weight"]
        out = np.zeros((x.shape[0], H, W, self.out_channels))
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i : i + s * H : s, j : j + s * W : s]
                out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1]))
        out = out.transpose(0, 3, 1, 2) + self.params["bias"][None, :, None, None]
        return out, (xp, x.shape)

    def backward(self, cache, grad):
        xp, x_shape = cache
        p, s, k = self.padding, self.stride, self.kernel_size
        H, W = grad.shape[2], grad.shape[3]
        w = self.params["weight"]
        g_w = np.zeros_like(w)
        g_xp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i : i + s * H : s, j : j + s * W : s]
                g_w[:, :, i, j] = np.tensordot(grad, patch, axes=([0, 2, 3], [0, 2, 3]))
                g_xp[:, :, i : i + s * H : s, j : j + s * W : s] += np.tensordot(grad, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        g_x = g_xp[:, :, p : p + x_shape[2], p : p + x_shape[3]]
        return [g_x], {"weight": g_w, "bias": grad.sum(axis=(0, 2, 3))}


class MaxPool2d(Layer):
    """
    2x2 / stride 2 max pooling; gradients route to the first maximal element of each window.
    """

    def forward(self, x):
        N, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"spatial size {H}x{W} is not divisible by 2")
        windows = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
        idx = np.argmax(windows, axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, cache, grad):
        idx, (N, C, H, W) = cache
        windows = np.zeros((N, C, H // 2, W // 2, 4))
        np.put_along_axis(windows, idx[..., None], grad[..., None], axis=-1)
        g_x = windows.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
        return [g_x], {}


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, grad):
        return [grad * mask], {}


class Tanh(Layer):
    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, y, grad):
        return [grad * (1.0 - y * y)], {}


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None, init_scale: float = 1.0):
        super().__init__()
        self.in_features, self.out_features, self.init_scale = in_features, out_features, init_scale
        shape = (out_features, in_features)
        self.params["weight"] = kaiming_normal(rng, shape, in_features, init_scale) if rng is not None else np.zeros(shape)
        self.params["bias"] = np.zeros(out_features)

    def config(self) -> dict:
        return dict(in_features=self.in_features, out_features=self.out_features, init_scale=self.init_scale)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"expected (N, {self.in_features}), got {x.shape}")
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, x, grad):
        return [grad @ self.params["weight"]], {"weight": grad.T @ x, "bias": grad.sum(axis=0)}


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


class Softmax(Layer):
    def __init__(self, axis: int = -1):
        super().__init__()
        self.axis = axis

    def config(self) -> dict:
        return {"axis": self.axis}

    def forward(self, x):
        y = softmax(x, self.axis)
        return y, y

    def backward(self, y, grad):
        return [y * (grad - (grad * y).sum(axis=self.axis, keepdims=True))], {}


class LogSoftmax(Layer):
    def __init__(self, axis: int = -1):
        super().__init__()
        self.axis = axis

    def config(self) -> dict:
        return {"axis": self.axis}

    def forward(self, x):
        y = log_softmax(x, self.axis)
        return y, y

    def backward(self, y, grad):
        return [grad - np.exp(y) * grad.sum(axis=self.axis, keepdims=True)], {}


class Upsample2x(Layer):
    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3), None

    def backward(self, cache, grad):
        N, C, H, W = grad.shape
        return [grad.reshape(N, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))], {}


class Concat(Layer):
    n_inputs = 2

    def __init__(self, axis: int = 1):
        super().__init__()
        self.axis = axis

    def config(self) -> dict:
        return {"axis": self.axis}

    def forward(self, *xs):
        return np.concatenate(xs, axis=self.axis), [x.shape[self.axis] for x in xs]

    def backward(self, sizes, grad):
        cuts = np.cumsum(sizes)[:-1]
        return list(np.split(grad, cuts, axis=self.axis)), {}


class Reshape(Layer):
    """
    Reshape everything but the batch dimension.
    """

    def __init__(self, shape: Sequence[int]):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def config(self) -> dict:
        return {"shape": list(self.shape)}

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, shape, grad):
        return [grad.reshape(shape)], {}


class Flatten(Reshape):
    def __init__(self):
        super().__init__((-1,))

    def config(self) -> dict:
        return {}


class Sum(Layer):
    def forward(self, x):
        return np.asarray(x.sum()), x.shape

    def backward(self, shape, grad):
        return [np.full(shape, float(grad))], {}


LAYER_TYPES = {
    cls.__name__: cls
    for cls in (Conv2d, MaxPool2d, ReLU, Tanh, Linear, Softmax, LogSoftmax, Upsample2x, Concat, Reshape, Flatten, Sum)
}


@dataclass
class Node:
    name: str
    layer: Optional[Layer]
    inputs: tuple = ()


class Graph:
    """
    Static computation graph. Nodes are added in topological order: every input of a
    node must already exist, so the graph is acyclic by construction.
    """

    def __init__(self):
        self.nodes: "OrderedDict[str, Node]" = OrderedDict()
        self._values: Optional[dict] = None
        self._caches: Optional[dict] = None

    def input(self, name: str) -> str:
        self._check_new(name)
        self.nodes[name] = Node(name, None)
        return name

    def add(self, name: str, layer: Layer, *inputs: str) -> str:
        self._check_new(name)
        for i in inputs:
            if i not in self.nodes:
                raise GraphError(f"node {name!r}: unknown input {i!r}")
        if len(inputs) < 1 or (layer.n_inputs == 1 and len(inputs) != 1):
            raise GraphError(f"node {name!r}: {type(layer).__name__} takes {layer.n_inputs} input(s)")
        self.nodes[name] = Node(name, layer, tuple(inputs))
        return name

    def _check_new(self, name: str) -> None:
        if name in self.nodes:
            raise GraphError(f"duplicate node name {name!r}")

    @property
    def input_names(self) -> list[str]:
        return [n.name for n in self.nodes.values() if n.layer is None]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for node in self.nodes.values():
            if node.layer is not None:
                for pname, value in node.layer.params.items():
                    out[f"{node.name}.{pname}"] = value
        return out

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        missing = set(own) - set(params)
        if missing:
            raise GraphError(f"missing parameters {sorted(missing)}")
        for key, value in own.items():
            value = np.asarray(params[key], dtype=np.float64)
            if value.shape != own[key].shape:
                raise GraphError(f"parameter {key!r}: shape {value.shape} != {own[key].shape}")
            own[key][...] = value

    def copy_parameters(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def forward(self, inputs: dict, outputs: Optional[Sequence[str]] = None) -> dict:
        values, caches = {}, {}
        for node in self.nodes.values():
            if node.layer is None:
                if node.name not in inputs:
                    raise GraphError(f"missing input {node.name!r}")
                values[node.name] = np.asarray(inputs[node.name], dtype=np.float64)
                continue
            try:
                out, cache = node.layer.forward(*(values[i] for i in node.inputs))
            except ValueError as e:
                raise GraphError(f"node {node.name!r}: {e}") from e
            values[node.name] = out
            caches[node.name] = cache
        self._values, self._caches = values, caches
        if outputs is None:
            return values
        return {k: values[k] for k in outputs}

    def value(self, name: str) -> np.ndarray:
        if self._values is None:
            raise GraphError("forward has not been run")
        return self._values[name]

    def backward(self, node: str, grad_output: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
        """
        Gradients of `node` (seeded with `grad_output`, or 1 for a scalar node) with respect
        to every parameter ("node.param") and every graph input (by input name).
        """
        if self._values is None:
            raise GraphError("backward called before forward")
        if node not in self.nodes:
            raise GraphError(f"unknown node {node!r}")
        out_value = self._values[node]
        if grad_output is None:
            if np.size(out_value) != 1:
                raise GraphError(f"node {node!r} is not scalar; pass grad_output")
            grad_output = np.ones_like(out_value)
        grad_output = np.asarray(grad_output, dtype=np.float64)
        if grad_output.shape != np.shape(out_value):
            raise GraphError(f"node {node!r}: grad shape {grad_output.shape} != {np.shape(out_value)}")

        grads = {node: grad_output}
        result = {k: np.zeros_like(v) for k, v in self.parameters().items()}
        for name in reversed(list(self.nodes)):
            g = grads.pop(name, None)
            spec = self.nodes[name]
            if g is None:
                continue
            if spec.layer is None:
                result[name] = g
                continue
            input_grads, param_grads = spec.layer.backward(self._caches[name], g)
            for pname, pg in param_grads.items():
                result[f"{name}.{pname}"] += pg
            for inp, ig in zip(spec.inputs, input_grads):
                grads[inp] = grads[inp] + ig if inp in grads else ig
        for name in self.input_names:
            result.setdefault(name, np.zeros_like(self._values[name]))
        return result

    def architecture(self) -> dict:
        return {
            "nodes": [
                {
                    "name": n.name,
                    "type": "Input" if n.layer is None else type(n.layer).__name__,
                    "config": {} if n.layer is None else n.layer.config(),
                    "inputs": list(n.inputs),
                }
                for n in self.nodes.values()
            ]
        }

    @staticmethod
    def from_architecture(arch: dict) -> "Graph":
        graph = Graph()
        for entry in arch["nodes"]:
            if entry["type"] == "Input":
                graph.input(entry["name"])
                continue
            try:
                cls = LAYER_TYPES[entry["type"]]
            except KeyError as e:
                raise GraphError(f"unknown layer type {entry['type']!r}") from e
            graph.add(entry["name"], cls(**entry.get("config", {})), *entry["inputs"])
        return graph


def forward(graph: Graph, inputs: dict, outputs: Optional[Sequence[str]] = None) -> dict:
    return graph.forward(inputs, outputs)


def backward(graph: Graph, loss_node: str, grad_output: Optional[np.ndarray] = None) -> dict:
    return graph.backward(loss_node, grad_output)


def parameter_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for key in sorted(params):
        h.update(key.encode("utf-8"))
        h.update(np.ascontiguousarray(params[key], dtype=np.float64).tobytes())
    return h.hexdigest()


def add_gradients(total: Optional[dict], grads: dict) -> dict:
    if total is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        total[k] = total[k] + v
    return total


# ---------------------------------------------------------------------------
# optimization


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    max_grad_norm: Optional[float] = None,
) -> tuple[dict, AdamState]:
    """
    One bias-corrected Adam step, applied in place to `params`. Gradients for keys not
    in `params` (e.g. graph inputs) are ignored.
    """
    grads = {k: grads[k] for k in params if k in grads}
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise GraphError(f"gradient {k!r}: shape {g.shape} != {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {k!r}")
    if max_grad_norm is not None:
        grads, _ = clip_by_global_norm(grads, max_grad_norm)

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class StepLr:
    """
    Multiplicative step schedule: lr(i) = base_lr * gamma ** (number of milestones <= i).
    """

    base_lr: float
    milestones: tuple = ()
    gamma: float = 1.0

    def __call__(self, iteration: int) -> float:
        passed = sum(1 for m in self.milestones if iteration >= m)
        return self.base_lr * self.gamma**passed


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: Union[float, Callable[[int], float]] = 1e-3, max_grad_norm: Optional[float] = None):
        self.params = params
        self.schedule = lr if callable(lr) else (lambda _it, _lr=lr: _lr)
        self.max_grad_norm = max_grad_norm
        self.state = AdamState()
        self.iteration = 0

    @property
    def lr(self) -> float:
        return self.schedule(self.iteration)

    def step(self, grads: dict[str, np.ndarray]) -> float:
        lr = self.lr
        adam_update(self.params, grads, self.state, lr, self.max_grad_norm)
        self.iteration += 1
        return lr


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(graph: Graph, directory: Union[str, Path], metadata: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez(directory / "params.npz", **graph.parameters())
    with open(directory / "architecture.yaml", "w") as f:
        yaml.safe_dump(
            {"format_version": CHECKPOINT_FORMAT_VERSION, "metadata": metadata or {}, **graph.architecture()},
            f,
            sort_keys=False,
        )
    return directory


def load_checkpoint(directory: Union[str, Path]) -> tuple[Graph, dict]:
    directory = Path(directory)
    with open(directory / "architecture.yaml") as f:
        arch = yaml.safe_load(f)
    version = arch.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise GraphError(f"unsupported checkpoint version {version!r} in {directory}")
    graph = Graph.from_architecture(arch)
    with np.load(directory / "params.npz") as data:
        graph.load_parameters({k: data[k] for k in data.files})
    return graph, arch.get("metadata", {})
