"""Dataflow-graph IR: operator vocabulary, shape inference, model interchange.

A model is a topologically ordered list of typed operator nodes plus a float32
weights blob. The IR is mutable while a transformation constructs it and is
treated read-only afterwards; campaign workers share graphs without locking.

On-disk format: a JSON manifest (nodes in topological order, attributes
inline) and a little-endian binary weights blob (magic RGWB) keyed by name.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    pass


class OpKind(str, Enum):
    INPUT = "Input"
    CONSTANT = "Constant"
    CONV2D = "Conv2D"
    FULLY_CONNECTED = "FullyConnected"
    BIAS_ADD = "BiasAdd"
    RELU = "ReLU"
    TANH = "Tanh"
    ATAN = "Atan"
    MAX_POOL = "MaxPool"
    AVG_POOL = "AvgPool"
    RESHAPE = "Reshape"
    CONCAT = "Concat"
    SOFTMAX = "Softmax"
    CLIP = "Clip"


# Activation kinds anchor range restriction; extension kinds inherit the
# producing activation's bounds.
ACT_KINDS = frozenset({OpKind.RELU, OpKind.TANH})
BOUND_EXTENSION_KINDS = frozenset(
    {OpKind.MAX_POOL, OpKind.AVG_POOL, OpKind.RESHAPE, OpKind.CONCAT}
)

# kinds with fixed arity; Concat accepts k >= 2 inputs
_ARITY = {
    OpKind.INPUT: 0,
    OpKind.CONSTANT: 0,
    OpKind.CONV2D: 1,
    OpKind.FULLY_CONNECTED: 1,
    OpKind.BIAS_ADD: 1,
    OpKind.RELU: 1,
    OpKind.TANH: 1,
    OpKind.ATAN: 1,
    OpKind.MAX_POOL: 1,
    OpKind.AVG_POOL: 1,
    OpKind.RESHAPE: 1,
    OpKind.SOFTMAX: 1,
    OpKind.CLIP: 1,
}


@dataclass
class TaskSpec:
    """What the model output means for outcome classification."""

    kind: str  # "classification" | "regression"
    num_classes: int = 0
    topk: int = 1
    sdc_thresholds: tuple[float, ...] = ()  # degrees, ascending
    unit: str = "degrees"  # regression output unit: "degrees" | "radians"

    def __post_init__(self):
        if self.kind == "classification":
            if self.num_classes < 2:
                raise GraphError("classification needs num_classes >= 2")
            if not 1 <= self.topk <= self.num_classes:
                raise GraphError("topk out of range")
        elif self.kind == "regression":
            th = tuple(float(t) for t in self.sdc_thresholds)
            if not th:
                raise GraphError("regression needs sdc_thresholds")
            if any(t <= 0 for t in th) or list(th) != sorted(th):
                raise GraphError("thresholds must be positive and ascending")
            if len(set(th)) != len(th):
                raise GraphError("thresholds must be strictly ascending")
            if self.unit not in ("degrees", "radians"):
                raise GraphError(f"unknown regression unit {self.unit!r}")
            object.__setattr__(self, "sdc_thresholds", th)
        else:
            raise GraphError(f"unknown task kind {self.kind!r}")

    def to_json(self) -> dict:
        if self.kind == "classification":
            return {
                "kind": self.kind,
                "num_classes": self.num_classes,
                "topk": self.topk,
            }
        return {
            "kind": self.kind,
            "sdc_thresholds": list(self.sdc_thresholds),
            "unit": self.unit,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TaskSpec":
        if obj.get("kind") == "classification":
            return cls(
                "classification",
                num_classes=int(obj["num_classes"]),
                topk=int(obj.get("topk", 1)),
            )
        if obj.get("kind") == "regression":
            return cls(
                "regression",
                sdc_thresholds=tuple(obj["sdc_thresholds"]),
                unit=obj.get("unit", "degrees"),
            )
        raise GraphError(f"bad task spec {obj!r}")


@dataclass
class Node:
    id: int
    kind: OpKind
    attrs: dict = field(default_factory=dict)
    inputs: list[int] = field(default_factory=list)
    weights_ref: str | None = None
    output_shape: tuple[int, ...] | None = None


@dataclass
class Graph:
    """Topologically ordered node list with one designated output."""

    nodes: list[Node]
    output_id: int
    task: TaskSpec
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {n.id: n for n in self.nodes}

    def node(self, node_id: int) -> Node:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise GraphError(f"node {node_id}: no such node") from None

    def consumers(self, node_id: int) -> list[Node]:
        return [n for n in self.nodes if node_id in n.inputs]

    def input_node(self) -> Node:
        inputs = [n for n in self.nodes if n.kind == OpKind.INPUT]
        if len(inputs) != 1:
            raise GraphError(f"expected exactly one Input node, got {len(inputs)}")
        return inputs[0]

    def last_fc_ids(self) -> frozenset[int]:
        """The final FullyConnected node plus its direct BiasAdd consumers.

        This is the set excluded from fault targeting when the campaign's
        last-layer exclusion is active.
        """
        fc = [n for n in self.nodes if n.kind == OpKind.FULLY_CONNECTED]
        if not fc:
            return frozenset()
        last = fc[-1]
        ids = {last.id}
        ids.update(
            c.id for c in self.consumers(last.id) if c.kind == OpKind.BIAS_ADD
        )
        return frozenset(ids)

    def validate(self) -> None:
        if not self.nodes:
            raise GraphError("no output node: graph is empty")
        seen: set[int] = set()
        for n in self.nodes:
            if n.id in seen:
                raise GraphError(f"node {n.id}: duplicate id")
            arity = _ARITY.get(n.kind)
            if n.kind == OpKind.CONCAT:
                if len(n.inputs) < 2:
                    raise GraphError(f"node {n.id}: Concat needs >= 2 inputs")
            elif len(n.inputs) != arity:
                raise GraphError(
                    f"node {n.id}: {n.kind.value} expects {arity} inputs, "
                    f"got {len(n.inputs)}"
                )
            for i in n.inputs:
                if i not in seen:
                    raise GraphError(f"node {n.id}: forward reference to {i}")
            seen.add(n.id)
        if self.output_id not in seen:
            raise GraphError(f"no output node: {self.output_id} undefined")
        self.input_node()
        for n in self.nodes:
            if n.weights_ref is not None and n.weights_ref not in self.weights:
                raise GraphError(
                    f"node {n.id}: dangling weights reference {n.weights_ref!r}"
                )


# -- shape inference -------------------------------------------------


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (list, tuple)):
        a, b = value
        return int(a), int(b)
    return int(value), int(value)


def same_padding(size: int, k: int, s: int) -> tuple[int, int, int]:
    """TF-convention 'same' padding: (out, pad_before, pad_after)."""
    out = -(-size // s)  # ceil
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def _infer_node_shape(graph: Graph, node: Node, shapes: dict[int, tuple]) -> tuple:
    k = node.kind
    if k in (OpKind.INPUT, OpKind.CONSTANT):
        if k == OpKind.CONSTANT and node.weights_ref is not None:
            return tuple(graph.weights[node.weights_ref].shape)
        return tuple(int(d) for d in node.attrs["shape"])

    ins = [shapes[i] for i in node.inputs]
    x = ins[0]

    if k == OpKind.CONV2D:
        if len(x) != 4 or x[0] != 1:
            raise GraphError(f"node {node.id}: Conv2D input must be [1,H,W,C]")
        w = graph.weights[node.weights_ref]
        kh, kw, cin, cout = w.shape
        if cin != x[3]:
            raise GraphError(
                f"node {node.id}: Conv2D channels {x[3]} != kernel cin {cin}"
            )
        sh, sw = _pair(node.attrs.get("stride", 1))
        pad = node.attrs.get("padding", "valid")
        if pad == "same":
            ho, _, _ = same_padding(x[1], kh, sh)
            wo, _, _ = same_padding(x[2], kw, sw)
        elif pad == "valid":
            if x[1] < kh or x[2] < kw:
                raise GraphError(f"node {node.id}: Conv2D window exceeds input")
            ho = (x[1] - kh) // sh + 1
            wo = (x[2] - kw) // sw + 1
        else:
            raise GraphError(f"node {node.id}: unknown padding {pad!r}")
        return (1, ho, wo, cout)

    if k == OpKind.FULLY_CONNECTED:
        if len(x) != 2 or x[0] != 1:
            raise GraphError(f"node {node.id}: FullyConnected input must be [1,N]")
        w = graph.weights[node.weights_ref]
        if w.shape[0] != x[1]:
            raise GraphError(
                f"node {node.id}: FC input {x[1]} != weight rows {w.shape[0]}"
            )
        return (1, w.shape[1])

    if k == OpKind.BIAS_ADD:
        b = graph.weights[node.weights_ref]
        if b.ndim != 1 or b.shape[0] != x[-1]:
            raise GraphError(
                f"node {node.id}: bias length {b.shape} != channels {x[-1]}"
            )
        return x

    if k in (OpKind.MAX_POOL, OpKind.AVG_POOL):
        if len(x) != 4:
            raise GraphError(f"node {node.id}: pool input must be rank 4")
        wh, ww = _pair(node.attrs["window"])
        sh, sw = _pair(node.attrs.get("stride", node.attrs["window"]))
        if x[1] < wh or x[2] < ww:
            raise GraphError(f"node {node.id}: pool window exceeds input")
        return (x[0], (x[1] - wh) // sh + 1, (x[2] - ww) // sw + 1, x[3])

    if k == OpKind.RESHAPE:
        target = tuple(int(d) for d in node.attrs["shape"])
        if int(np.prod(target)) != int(np.prod(x)):
            raise GraphError(
                f"node {node.id}: cannot reshape {x} to {target}"
            )
        return target

    if k == OpKind.CONCAT:
        axis = int(node.attrs["axis"])
        rank = len(x)
        if axis < 0 or axis >= rank:
            raise GraphError(f"node {node.id}: bad concat axis {axis}")
        total = 0
        for s in ins:
            if len(s) != rank:
                raise GraphError(f"node {node.id}: concat rank mismatch")
            for d in range(rank):
                if d != axis and s[d] != x[d]:
                    raise GraphError(
                        f"node {node.id}: concat shapes {ins} differ off axis {axis}"
                    )
            total += s[axis]
        out = list(x)
        out[axis] = total
        return tuple(out)

    if k in (OpKind.RELU, OpKind.TANH, OpKind.ATAN, OpKind.SOFTMAX, OpKind.CLIP):
        return x

    raise GraphError(f"node {node.id}: no shape rule for {k.value}")


def infer_shapes(graph: Graph) -> Graph:
    """Populate every node's output_shape; total and deterministic on valid graphs."""
    graph.validate()
    shapes: dict[int, tuple] = {}
    new_nodes = []
    for node in graph.nodes:
        shape = _infer_node_shape(graph, node, shapes)
        shapes[node.id] = shape
        new_nodes.append(replace(node, output_shape=shape))
    return Graph(new_nodes, graph.output_id, graph.task, graph.weights)


# -- manifest + weights blob ----------------------------------------

_MAGIC_WEIGHTS = b"RGWB"
_DTYPE_TAGS = {0: np.float32}


def _manifest_dict(graph: Graph) -> dict:
    nodes = []
    for n in graph.nodes:
        nodes.append(
            {
                "id": n.id,
                "kind": n.kind.value,
                "attrs": n.attrs,
                "inputs": list(n.inputs),
                "weights": n.weights_ref,
            }
        )
    return {"nodes": nodes, "output": graph.output_id, "task": graph.task.to_json()}


def save_weights_blob(weights: dict[str, np.ndarray], path) -> None:
    """Write the RGWB blob; records sorted by name for byte determinism."""
    with open(path, "wb") as f:
        f.write(_MAGIC_WEIGHTS)
        f.write(struct.pack("<I", len(weights)))
        for name in sorted(weights):
            arr = np.ascontiguousarray(weights[name], dtype="<f4")
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<BB", 0, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights_blob(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC_WEIGHTS:
        raise GraphError(f"{path}: bad weights magic {data[:4]!r}")
    off = 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    weights: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        dtype_tag, rank = struct.unpack_from("<BB", data, off)
        off += 2
        if dtype_tag not in _DTYPE_TAGS:
            raise GraphError(f"{path}: unknown dtype tag {dtype_tag}")
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        weights[name] = arr.astype(np.float32)
    return weights


def save_model(graph: Graph, manifest_path, weights_path) -> None:
    """Write manifest JSON + weights blob such that load_model inverts."""
    graph.validate()
    text = json.dumps(_manifest_dict(graph), indent=2) + "\n"
    Path(manifest_path).write_text(text, encoding="utf-8")
    save_weights_blob(graph.weights, weights_path)


def load_model(manifest_path, weights_path) -> Graph:
    """Load and validate a model; shapes are re-inferred and checked."""
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise GraphError(f"{manifest_path}: malformed manifest: {e}") from e
    weights = load_weights_blob(weights_path)
    nodes = []
    for obj in manifest.get("nodes", []):
        try:
            kind = OpKind(obj["kind"])
        except ValueError:
            raise GraphError(
                f"node {obj.get('id')}: unknown kind {obj.get('kind')!r}"
            ) from None
        nodes.append(
            Node(
                id=int(obj["id"]),
                kind=kind,
                attrs=dict(obj.get("attrs", {})),
                inputs=[int(i) for i in obj.get("inputs", [])],
                weights_ref=obj.get("weights"),
            )
        )
    graph = Graph(
        nodes,
        int(manifest["output"]),
        TaskSpec.from_json(manifest["task"]),
        weights,
    )
    return infer_shapes(graph)


def structurally_equal(a: Graph, b: Graph) -> bool:
    if len(a.nodes) != len(b.nodes) or a.output_id != b.output_id:
        return False
    if a.task.to_json() != b.task.to_json():
        return False
    for na, nb in zip(a.nodes, b.nodes):
        if (na.id, na.kind, na.attrs, na.inputs, na.weights_ref) != (
            nb.id,
            nb.kind,
            nb.attrs,
            nb.inputs,
            nb.weights_ref,
        ):
            return False
    if sorted(a.weights) != sorted(b.weights):
        return False
    return all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
