"""Desk-scale models: a deterministic trainer, builders, and toy graphs.

The trainer is plain mini-batch gradient descent (constant learning rate,
classical momentum, seeded shuffling) over float64 im2col kernels, so a
fixed seed reproduces weight blobs exactly. Architectures are small enough
that fault-injection campaigns over them finish in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import datasets
from .engine import infer
from .graph import Graph, Node, OpKind, TaskSpec, infer_shapes, same_padding
from .numerics import FLOAT32, NumericFormat

_RAD2DEG = 180.0 / math.pi

ARCHITECTURES = ("tiny-mlp", "lenet-mini", "steer-mini", "steer-mini-radians")


class ZooError(ValueError):
    pass


@dataclass
class TrainSpec:
    arch: str
    epochs: int
    learning_rate: float
    seed: int
    data_dir: str | None = None
    batch_size: int = 32
    momentum: float = 0.9

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ZooError(f"unknown architecture {self.arch!r}")


# -- trainer layers (float64, batched) --------------------------------


class _Conv:
    def __init__(self, kh, kw, ci, co, rng):
        std = math.sqrt(2.0 / (kh * kw * ci))
        self.w = (rng.standard_normal((kh, kw, ci, co)) * std).astype(np.float32).astype(np.float64)
        self.b = np.zeros(co, dtype=np.float64)
        self.params = ["w", "b"]

    def forward(self, x):
        kh, kw, ci, co = self.w.shape
        n, h, w_, _ = x.shape
        ho, pt, pb = same_padding(h, kh, 1)
        wo, pl, pr = same_padding(w_, kw, 1)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        self._xp_shape = xp.shape
        self._in_hw = (h, w_)
        cols = np.empty((n, ho, wo, kh * kw * ci))
        i = 0
        for ky in range(kh):
            for kx in range(kw):
                cols[..., i * ci : (i + 1) * ci] = xp[:, ky : ky + ho, kx : kx + wo, :]
                i += 1
        self._cols = cols.reshape(n * ho * wo, kh * kw * ci)
        self._dims = (n, ho, wo, pt, pl)
        out = self._cols @ self.w.reshape(-1, co) + self.b
        return out.reshape(n, ho, wo, co)

    def backward(self, grad):
        kh, kw, ci, co = self.w.shape
        n, ho, wo, pt, pl = self._dims
        h, w_ = self._in_hw
        g = grad.reshape(-1, co)
        self.dw = (self._cols.T @ g).reshape(self.w.shape)
        self.db = g.sum(axis=0)
        dcols = (g @ self.w.reshape(-1, co).T).reshape(n, ho, wo, kh * kw * ci)
        dxp = np.zeros(self._xp_shape)
        i = 0
        for ky in range(kh):
            for kx in range(kw):
                dxp[:, ky : ky + ho, kx : kx + wo, :] += dcols[..., i * ci : (i + 1) * ci]
                i += 1
        return dxp[:, pt : pt + h, pl : pl + w_, :]


class _ReLU:
    params: list = []

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class _MaxPool2:
    params: list = []

    def forward(self, x):
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        xr = (
            x[:, : ho * 2, : wo * 2, :]
            .reshape(n, ho, 2, wo, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, ho, wo, c, 4)
        )
        self._idx = xr.argmax(axis=-1)
        self._in_shape = x.shape
        return np.take_along_axis(xr, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, ho, wo, c = grad.shape
        d = np.zeros((n, ho, wo, c, 4))
        np.put_along_axis(d, self._idx[..., None], grad[..., None], axis=-1)
        d = d.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        out = np.zeros(self._in_shape)
        out[:, : ho * 2, : wo * 2, :] = d.reshape(n, ho * 2, wo * 2, c)
        return out


class _Flatten:
    params: list = []

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class _Dense:
    def __init__(self, n_in, n_out, rng):
        std = math.sqrt(2.0 / n_in)
        self.w = (rng.standard_normal((n_in, n_out)) * std).astype(np.float32).astype(np.float64)
        self.b = np.zeros(n_out, dtype=np.float64)
        self.params = ["w", "b"]

    def forward(self, x):
        self._x = x
        return x @ self.w + self.b

    def backward(self, grad):
        self.dw = self._x.T @ grad
        self.db = grad.sum(axis=0)
        return grad @ self.w.T


def _softmax_ce(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.log(probs[np.arange(n), labels] + 1e-12).mean()
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _mse(pred, target):
    diff = pred.reshape(-1) - target
    loss = float((diff**2).mean())
    return loss, (2.0 * diff / diff.size).reshape(pred.shape)


# -- architectures -----------------------------------------------------


def _build_layers(arch: str, seed: int):
    rng = np.random.default_rng([seed, 0])
    if arch == "tiny-mlp":
        return [_Dense(2, 8, rng), _ReLU(), _Dense(8, 2, rng)]
    if arch == "lenet-mini":
        return [
            _Conv(5, 5, 1, 8, rng),
            _ReLU(),
            _MaxPool2(),
            _Conv(5, 5, 8, 16, rng),
            _ReLU(),
            _MaxPool2(),
            _Flatten(),
            _Dense(64, 32, rng),
            _ReLU(),
            _Dense(32, 10, rng),
        ]
    # both steering variants share the trunk
    return [
        _Conv(5, 5, 1, 8, rng),
        _ReLU(),
        _MaxPool2(),
        _Conv(3, 3, 8, 8, rng),
        _ReLU(),
        _MaxPool2(),
        _Flatten(),
        _Dense(128, 32, rng),
        _ReLU(),
        _Dense(32, 1, rng),
    ]


def _flat_dim_of(arch: str) -> int:
    return {"lenet-mini": 64, "steer-mini": 128, "steer-mini-radians": 128}[arch]


def _task_of(arch: str) -> TaskSpec:
    if arch == "tiny-mlp":
        return TaskSpec("classification", num_classes=2)
    if arch == "lenet-mini":
        return TaskSpec("classification", num_classes=10)
    unit = "radians" if arch == "steer-mini-radians" else "degrees"
    return TaskSpec("regression", sdc_thresholds=(15.0, 30.0, 60.0, 120.0), unit=unit)


def make_separable_2class(count: int = 200, seed: int = 0):
    """Linearly separable two-blob set for the smallest architecture."""
    rng = np.random.default_rng(seed)
    half = count // 2
    a = rng.normal((-2.0, -2.0), 0.4, size=(half, 2))
    b = rng.normal((2.0, 2.0), 0.4, size=(count - half, 2))
    x = np.concatenate([a, b]).astype(np.float32)
    y = np.concatenate([np.zeros(half, np.int64), np.ones(count - half, np.int64)])
    order = rng.permutation(count)
    return x[order], y[order]


def _load_training_data(spec: TrainSpec):
    arch = spec.arch
    if arch == "tiny-mlp":
        x, y = make_separable_2class(seed=spec.seed)
        return x.reshape(len(x), 2), y
    if arch == "lenet-mini":
        if spec.data_dir is None:
            raise ZooError("lenet-mini needs a data_dir with IDX digit files")
        x, y = datasets.load_digit_split(spec.data_dir, "train")
        return x, y
    if spec.data_dir is None:
        raise ZooError("steering models need a data_dir with RGTN steering files")
    x, deg = datasets.load_steering_split(spec.data_dir, "train")
    if arch == "steer-mini-radians":
        # targets in tan-space so the trailing Atan emits radians
        return x, np.tan(np.radians(deg.astype(np.float64)))
    return x, deg.astype(np.float64)


def train(spec: TrainSpec) -> tuple[Graph, dict]:
    """Train per the spec and freeze into a Graph; deterministic per seed."""
    x, y = _load_training_data(spec)
    layers = _build_layers(spec.arch, spec.seed)
    task = _task_of(spec.arch)
    classification = task.kind == "classification"

    velocities = {}
    shuffle_rng = np.random.default_rng([spec.seed, 1])
    n = len(x)
    x = x.astype(np.float64)
    last_loss = math.inf
    for _ in range(spec.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            h = x[idx]
            for layer in layers:
                h = layer.forward(h)
            if classification:
                loss, grad = _softmax_ce(h, y[idx])
            else:
                loss, grad = _mse(h, y[idx])
            if math.isnan(loss) or math.isinf(loss):
                raise ZooError("training diverged (loss is not finite)")
            last_loss = loss
            for layer in reversed(layers):
                grad = layer.backward(grad)
            for li, layer in enumerate(layers):
                for p in layer.params:
                    g = getattr(layer, "d" + p)
                    key = (li, p)
                    v = velocities.get(key)
                    v = g if v is None else spec.momentum * v + g
                    velocities[key] = v
                    setattr(layer, p, getattr(layer, p) - spec.learning_rate * v)

    input_shape = (
        (1, 2)
        if spec.arch == "tiny-mlp"
        else (1,) + tuple(x.shape[1:3]) + (1,)
    )
    flat_dim = _flat_dim_of(spec.arch) if spec.arch != "tiny-mlp" else None
    graph = _export(spec.arch, layers, task, input_shape, flat_dim)
    metrics = {"final_loss": float(last_loss), "samples": int(n)}
    return graph, metrics


def _export(arch, layers, task, input_shape, flat_dim):
    # stitch flat_dim into the reshape while exporting
    nodes = [Node(0, OpKind.INPUT, {"shape": list(input_shape)})]
    weights: dict[str, np.ndarray] = {}
    prev, nid, conv_i, fc_i = 0, 1, 0, 0

    def add(kind, attrs=None, wref=None):
        nonlocal prev, nid
        nodes.append(Node(nid, kind, attrs or {}, [prev], wref))
        prev = nid
        nid += 1

    for layer in layers:
        if isinstance(layer, _Conv):
            conv_i += 1
            wname, bname = f"conv{conv_i}.w", f"conv{conv_i}.b"
            weights[wname] = layer.w.astype(np.float32)
            weights[bname] = layer.b.astype(np.float32)
            add(OpKind.CONV2D, {"stride": 1, "padding": "same"}, wname)
            add(OpKind.BIAS_ADD, None, bname)
        elif isinstance(layer, _Dense):
            fc_i += 1
            wname, bname = f"fc{fc_i}.w", f"fc{fc_i}.b"
            weights[wname] = layer.w.astype(np.float32)
            weights[bname] = layer.b.astype(np.float32)
            add(OpKind.FULLY_CONNECTED, None, wname)
            add(OpKind.BIAS_ADD, None, bname)
        elif isinstance(layer, _ReLU):
            add(OpKind.RELU)
        elif isinstance(layer, _MaxPool2):
            add(OpKind.MAX_POOL, {"window": [2, 2], "stride": [2, 2]})
        elif isinstance(layer, _Flatten):
            add(OpKind.RESHAPE, {"shape": [1, flat_dim]})
        else:
            raise ZooError(f"cannot export layer {type(layer).__name__}")
    if arch == "steer-mini-radians":
        add(OpKind.ATAN)
    return infer_shapes(Graph(nodes, prev, task, weights))


def evaluate_accuracy(
    graph: Graph, inputs: np.ndarray, targets: np.ndarray, fmt: NumericFormat = FLOAT32
) -> dict:
    """Task metric over a labeled dataset: accuracy, or RMSE + avg deviation."""
    task = graph.task
    if task.kind == "classification":
        hits = 0
        topk_hits = 0
        for x, label in zip(inputs, targets):
            scores = infer(graph, x[None, ...] if x.ndim == 3 else x, fmt).to_floats().reshape(-1)
            order = sorted(range(scores.size), key=lambda i: (-scores[i], i))
            hits += int(order[0] == label)
            topk_hits += int(label in order[: task.topk])
        out = {"accuracy": hits / len(inputs)}
        if task.topk > 1:
            out["topk_accuracy"] = topk_hits / len(inputs)
        return out
    scale = _RAD2DEG if task.unit == "radians" else 1.0
    preds = []
    for x in inputs:
        out = infer(graph, x[None, ...] if x.ndim == 3 else x, fmt).to_floats().reshape(-1)
        preds.append(float(out[0]) * scale)
    preds = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    dev = preds - t
    return {
        "rmse": float(np.sqrt((dev**2).mean())),
        "avg_deviation": float(np.abs(dev).mean()),
    }


# -- toy graphs for oracles and property experiments -------------------


def build_bound_chain(n_kernels: int = 4) -> Graph:
    """ReLU -> MaxPool -> 1x1-identity Conv -> ReLU over a 2-vector input.

    The fault-free output is an n_kernels-vector equal to max(input); a
    high-bit flip on the pool output propagates into every output element.
    """
    w = np.ones((1, 1, 1, n_kernels), dtype=np.float32)
    task = TaskSpec("regression", sdc_thresholds=(15.0, 30.0, 60.0, 120.0))
    nodes = [
        Node(0, OpKind.INPUT, {"shape": [1, 1, 2, 1]}),
        Node(1, OpKind.RELU, {}, [0]),
        Node(2, OpKind.MAX_POOL, {"window": [1, 2], "stride": [1, 2]}, [1]),
        Node(3, OpKind.CONV2D, {"stride": 1, "padding": "valid"}, [2], "conv.w"),
        Node(4, OpKind.RELU, {}, [3]),
    ]
    return infer_shapes(Graph(nodes, 4, task, {"conv.w": w}))


def build_toy_classifier(seed: int = 7) -> Graph:
    """Three-layer toy classifier small enough for exhaustive enumeration."""
    rng = np.random.default_rng(seed)
    weights = {
        "conv.w": (rng.standard_normal((3, 3, 1, 2)) * 0.8).astype(np.float32),
        "conv.b": (rng.standard_normal(2) * 0.3).astype(np.float32),
        "fc.w": (rng.standard_normal((8, 3)) * 0.8).astype(np.float32),
        "fc.b": (rng.standard_normal(3) * 0.3).astype(np.float32),
    }
    task = TaskSpec("classification", num_classes=3)
    nodes = [
        Node(0, OpKind.INPUT, {"shape": [1, 4, 4, 1]}),
        Node(1, OpKind.CONV2D, {"stride": 1, "padding": "same"}, [0], "conv.w"),
        Node(2, OpKind.BIAS_ADD, {}, [1], "conv.b"),
        Node(3, OpKind.RELU, {}, [2]),
        Node(4, OpKind.MAX_POOL, {"window": [2, 2], "stride": [2, 2]}, [3]),
        Node(5, OpKind.RESHAPE, {"shape": [1, 8]}, [4]),
        Node(6, OpKind.FULLY_CONNECTED, {}, [5], "fc.w"),
        Node(7, OpKind.BIAS_ADD, {}, [6], "fc.b"),
    ]
    return infer_shapes(Graph(nodes, 7, task, weights))


def build_tanh_toy(seed: int = 11) -> Graph:
    """Tanh-activation toy classifier for the activation-swap baseline."""
    rng = np.random.default_rng(seed)
    weights = {
        "conv.w": (rng.standard_normal((3, 3, 1, 2)) * 0.9).astype(np.float32),
        "conv.b": (rng.standard_normal(2) * 0.2).astype(np.float32),
        "fc.w": (rng.standard_normal((8, 2)) * 0.9).astype(np.float32),
        "fc.b": (rng.standard_normal(2) * 0.2).astype(np.float32),
    }
    task = TaskSpec("classification", num_classes=2)
    nodes = [
        Node(0, OpKind.INPUT, {"shape": [1, 4, 4, 1]}),
        Node(1, OpKind.CONV2D, {"stride": 1, "padding": "same"}, [0], "conv.w"),
        Node(2, OpKind.BIAS_ADD, {}, [1], "conv.b"),
        Node(3, OpKind.TANH, {}, [2]),
        Node(4, OpKind.MAX_POOL, {"window": [2, 2], "stride": [2, 2]}, [3]),
        Node(5, OpKind.RESHAPE, {"shape": [1, 8]}, [4]),
        Node(6, OpKind.FULLY_CONNECTED, {}, [5], "fc.w"),
        Node(7, OpKind.BIAS_ADD, {}, [6], "fc.b"),
    ]
    return infer_shapes(Graph(nodes, 7, task, weights))


def build_monotone_chain() -> Graph:
    """Positive-weight MAC/ReLU chain: fault impact grows with bit order."""
    weights = {
        "conv.w": np.array([[[[1.0, 0.5]]]], dtype=np.float32),
        "fc.w": np.array([[1.0], [0.75], [0.5], [0.25]], dtype=np.float32),
        "fc.b": np.zeros(1, dtype=np.float32),
    }
    task = TaskSpec("regression", sdc_thresholds=(15.0, 30.0, 60.0, 120.0))
    nodes = [
        Node(0, OpKind.INPUT, {"shape": [1, 1, 4, 1]}),
        Node(1, OpKind.RELU, {}, [0]),
        Node(2, OpKind.MAX_POOL, {"window": [1, 2], "stride": [1, 2]}, [1]),
        Node(3, OpKind.CONV2D, {"stride": 1, "padding": "valid"}, [2], "conv.w"),
        Node(4, OpKind.RELU, {}, [3]),
        Node(5, OpKind.RESHAPE, {"shape": [1, 4]}, [4]),
        Node(6, OpKind.FULLY_CONNECTED, {}, [5], "fc.w"),
        Node(7, OpKind.BIAS_ADD, {}, [6], "fc.b"),
    ]
    return infer_shapes(Graph(nodes, 7, task, weights))
