"""Graph execution with optional fault hooks, plus FLOP accounting.

Executions are deterministic: given the same (graph, input, fault, format)
the output is bit-identical run to run and across backends. The engine is
re-entrant; each call owns its activation buffers and read-only shares the
graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..graph import Graph, GraphError, Node, OpKind, same_padding
from ..numerics import (
    FLOAT32,
    CorrectionPolicy,
    NumericFormat,
    NumericsError,
    Tensor,
    flip_bits,
    quantize_array,
)
from . import ops
from .backend import (  # noqa: F401  (re-exported)
    HAVE_COMPILED,
    active_backend,
    conv2d,
    fully_connected,
    set_backend,
)


class EngineError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    """One injected fault: flip bit_positions of one output element of target_op."""

    target_op: int
    element_index: int
    bit_positions: tuple[int, ...]
    trial_index: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "bit_positions", tuple(sorted(int(b) for b in self.bit_positions))
        )
        if len(set(self.bit_positions)) != len(self.bit_positions):
            raise EngineError("bit positions must be distinct")


@dataclass
class ExecutionTrace:
    outputs: dict[int, Tensor] = field(default_factory=dict)
    fault_applied: FaultSpec | None = None
    flops: dict[int, int] = field(default_factory=dict)


@dataclass
class FlopCount:
    per_node: dict[int, int]
    total: int


def _node_flops(graph: Graph, node: Node) -> int:
    if node.output_shape is None:
        raise EngineError(f"node {node.id}: shapes not inferred")
    n_out = int(np.prod(node.output_shape))
    k = node.kind
    if k == OpKind.CONV2D:
        kh, kw, ci, _ = graph.weights[node.weights_ref].shape
        return 2 * kh * kw * ci * n_out
    if k == OpKind.FULLY_CONNECTED:
        w = graph.weights[node.weights_ref]
        return 2 * int(w.shape[0]) * int(w.shape[1])
    if k == OpKind.CLIP:
        return 2 * n_out  # one min, one max comparison per element
    if k in (OpKind.BIAS_ADD, OpKind.RELU, OpKind.TANH, OpKind.ATAN, OpKind.SOFTMAX):
        return n_out
    if k in (OpKind.MAX_POOL, OpKind.AVG_POOL):
        wh, ww = _pair(node.attrs["window"])
        return wh * ww * n_out
    return 0  # Input, Constant, Reshape, Concat


def count_flops(graph: Graph) -> FlopCount:
    per_node = {n.id: _node_flops(graph, n) for n in graph.nodes}
    return FlopCount(per_node, sum(per_node.values()))


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (list, tuple)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _prepared_weights(graph: Graph, fmt: NumericFormat) -> dict[str, np.ndarray]:
    """Weights encoded for the target format, cached on the graph."""
    cache = getattr(graph, "_codec_cache", None)
    if cache is None:
        cache = {}
        graph._codec_cache = cache
    key = fmt.name
    if key not in cache:
        cache[key] = {name: quantize_array(arr, fmt) for name, arr in graph.weights.items()}
    return cache[key]


def _apply_fault(arr: np.ndarray, fault: FaultSpec, fmt: NumericFormat) -> np.ndarray:
    flat = arr.reshape(-1)
    if not 0 <= fault.element_index < flat.size:
        raise EngineError(
            f"fault element {fault.element_index} out of range for size {flat.size}"
        )
    out = arr.copy()
    oflat = out.reshape(-1)
    if fmt.is_float:
        bits = oflat.view(np.uint32)
        mask = np.uint32(0)
        for p in fault.bit_positions:
            if not 0 <= p < 32:
                raise EngineError(f"bit position {p} out of width 32")
            mask |= np.uint32(1) << np.uint32(p)
        bits[fault.element_index] ^= mask
    else:
        try:
            oflat[fault.element_index] = flip_bits(
                int(oflat[fault.element_index]), fault.bit_positions, fmt
            )
        except NumericsError as e:
            raise EngineError(str(e)) from e
    return out


def _conv_node(graph: Graph, node: Node, x: np.ndarray, w: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    kh, kw = w.shape[0], w.shape[1]
    sh, sw = _pair(node.attrs.get("stride", 1))
    padding = node.attrs.get("padding", "valid")
    plane = x[0]
    if padding == "same":
        ho, pt, pb = same_padding(plane.shape[0], kh, sh)
        wo, pl, pr = same_padding(plane.shape[1], kw, sw)
        plane = np.pad(plane, ((pt, pb), (pl, pr), (0, 0)))
    else:
        ho = (plane.shape[0] - kh) // sh + 1
        wo = (plane.shape[1] - kw) // sw + 1
    return conv2d(plane, w, ho, wo, sh, sw, fmt)[None, ...]


def _clip_rng(node: Node) -> np.random.Generator:
    # fresh per execution so repeated runs draw identically
    return np.random.default_rng([int(node.attrs.get("seed", 0)), node.id])


def _eval_node(
    graph: Graph,
    node: Node,
    acts: dict[int, np.ndarray],
    weights: dict[str, np.ndarray],
    fmt: NumericFormat,
) -> np.ndarray:
    k = node.kind
    if k == OpKind.CONSTANT:
        return weights[node.weights_ref].reshape(node.output_shape)
    x = acts[node.inputs[0]] if node.inputs else None
    if k == OpKind.CONV2D:
        return _conv_node(graph, node, x, weights[node.weights_ref], fmt)
    if k == OpKind.FULLY_CONNECTED:
        return fully_connected(x[0], weights[node.weights_ref], fmt)[None, :]
    if k == OpKind.BIAS_ADD:
        return ops.bias_add(x, weights[node.weights_ref], fmt)
    if k == OpKind.RELU:
        return ops.relu(x, fmt)
    if k == OpKind.TANH:
        return ops.tanh(x, fmt)
    if k == OpKind.ATAN:
        return ops.atan(x, fmt)
    if k == OpKind.SOFTMAX:
        return ops.softmax(x, fmt)
    if k == OpKind.MAX_POOL:
        wh, ww = _pair(node.attrs["window"])
        sh, sw = _pair(node.attrs.get("stride", node.attrs["window"]))
        return ops.max_pool(x[0], wh, ww, sh, sw)[None, ...]
    if k == OpKind.AVG_POOL:
        wh, ww = _pair(node.attrs["window"])
        sh, sw = _pair(node.attrs.get("stride", node.attrs["window"]))
        return ops.avg_pool(x[0], wh, ww, sh, sw, fmt)[None, ...]
    if k == OpKind.RESHAPE:
        return x.reshape(node.output_shape)
    if k == OpKind.CONCAT:
        arrays = [acts[i] for i in node.inputs]
        return np.concatenate(arrays, axis=int(node.attrs["axis"]))
    if k == OpKind.CLIP:
        policy = CorrectionPolicy.from_name(node.attrs.get("policy", "to-bound"))
        rng = _clip_rng(node) if policy is CorrectionPolicy.RANDOM_IN_RANGE else None
        return ops.clip_apply(
            x, float(node.attrs["low"]), float(node.attrs["up"]), policy, fmt, rng
        )
    raise EngineError(f"node {node.id}: no kernel for {k.value}")


def _as_input_array(graph: Graph, input_values, fmt: NumericFormat) -> np.ndarray:
    inp = graph.input_node()
    if isinstance(input_values, Tensor):
        values = input_values.to_floats()
    else:
        values = np.asarray(input_values, dtype=np.float64)
    shape = tuple(inp.output_shape or inp.attrs["shape"])
    if values.size != int(np.prod(shape)):
        raise EngineError(
            f"input size {values.size} does not match Input shape {shape}"
        )
    return quantize_array(values.reshape(shape), fmt)


def _check_fault_target(
    graph: Graph, fault: FaultSpec, exclude_last_fc: bool, allow_clip_target: bool
) -> None:
    node = graph.node(fault.target_op)
    if node.kind == OpKind.CLIP and not allow_clip_target:
        raise EngineError(f"fault target {node.id} is a Clip node")
    if exclude_last_fc and fault.target_op in graph.last_fc_ids():
        raise EngineError(f"fault target {node.id} is in the excluded final FC layer")


def _execute(
    graph: Graph,
    input_values,
    fmt: NumericFormat,
    fault: FaultSpec | None = None,
    retain_ids=None,
    exclude_last_fc: bool = False,
    allow_clip_target: bool = False,
) -> tuple[Tensor, ExecutionTrace]:
    if fault is not None:
        _check_fault_target(graph, fault, exclude_last_fc, allow_clip_target)
    weights = _prepared_weights(graph, fmt)
    acts: dict[int, np.ndarray] = {}
    trace = ExecutionTrace(fault_applied=fault)
    retain = set(retain_ids) if retain_ids is not None else set()
    x0 = _as_input_array(graph, input_values, fmt)
    for node in graph.nodes:
        if node.kind == OpKind.INPUT:
            arr = x0
        else:
            arr = _eval_node(graph, node, acts, weights, fmt)
        if fault is not None and fault.target_op == node.id:
            arr = _apply_fault(arr, fault, fmt)
        acts[node.id] = arr
        if node.id in retain:
            trace.outputs[node.id] = Tensor(arr.shape, fmt, arr.copy())
    out = acts[graph.output_id]
    trace.flops = {n.id: _node_flops(graph, n) for n in graph.nodes}
    return Tensor(out.shape, fmt, out), trace


def infer(graph: Graph, input_values, fmt: NumericFormat = FLOAT32) -> Tensor:
    """Fault-free forward pass."""
    out, _ = _execute(graph, input_values, fmt)
    return out


def infer_with_fault(
    graph: Graph,
    input_values,
    fault: FaultSpec,
    fmt: NumericFormat = FLOAT32,
    exclude_last_fc: bool = False,
    allow_clip_target: bool = False,
    retain_ids=None,
) -> tuple[Tensor, ExecutionTrace]:
    """Forward pass with one element's bits flipped before downstream use."""
    return _execute(
        graph,
        input_values,
        fmt,
        fault=fault,
        retain_ids=retain_ids,
        exclude_last_fc=exclude_last_fc,
        allow_clip_target=allow_clip_target,
    )


def infer_trace(
    graph: Graph, input_values, fmt: NumericFormat = FLOAT32, retain_ids=None
) -> tuple[Tensor, ExecutionTrace]:
    """Fault-free pass retaining selected per-node outputs (profiler hook)."""
    return _execute(graph, input_values, fmt, retain_ids=retain_ids)
