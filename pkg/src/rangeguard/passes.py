"""Graph rewrites: range-guard insertion and the activation-swap baseline.

insert_range_guards walks the node list once (O(n)): each activation node
gets a Clip with its profiled bounds, and qualifying successors (MaxPool,
AvgPool, Reshape, Concat) inherit bounds from the activations they depend
on. Extension is transitive along chains of those kinds by default; one-hop
mode restricts it to immediate successors of an activation.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .graph import ACT_KINDS, Graph, Node, OpKind, infer_shapes
from .numerics import CorrectionPolicy
from .profiler import BoundSet


class PassError(ValueError):
    pass


_CHAIN_KINDS = frozenset({OpKind.MAX_POOL, OpKind.AVG_POOL, OpKind.RESHAPE})


def _check_not_instrumented(graph: Graph) -> None:
    for n in graph.nodes:
        if n.kind in ACT_KINDS:
            if any(c.kind == OpKind.CLIP for c in graph.consumers(n.id)):
                raise PassError(
                    f"node {n.id}: already instrumented (Clip follows an activation)"
                )


def insert_range_guards(
    graph: Graph,
    bounds: BoundSet,
    policy: CorrectionPolicy = CorrectionPolicy.TO_BOUND,
    extension: str = "transitive",
    policy_seed: int = 0,
) -> Graph:
    """Insert Clip nodes after activations and bound-inheriting successors.

    Original nodes keep their ids; Clip nodes take fresh ids past the
    current maximum, which keeps manifest diffs reviewable.
    """
    if extension not in ("transitive", "one-hop"):
        raise PassError(f"unknown extension mode {extension!r}")
    graph.validate()
    _check_not_instrumented(graph)

    next_id = max(n.id for n in graph.nodes) + 1
    remap: dict[int, int] = {}  # original producer id -> clip id
    bound_of: dict[int, tuple[float, float]] = {}  # original id -> inherited bounds
    is_act_source: dict[int, bool] = {}
    new_nodes: list[Node] = []

    def emit_clip(after: Node, low: float, up: float) -> None:
        nonlocal next_id
        attrs = {"low": float(low), "up": float(up), "policy": policy.value}
        if policy is CorrectionPolicy.RANDOM_IN_RANGE:
            attrs["seed"] = int(policy_seed)
        new_nodes.append(Node(next_id, OpKind.CLIP, attrs, [after.id]))
        remap[after.id] = next_id
        next_id += 1

    for node in graph.nodes:
        rewired = replace(
            node,
            inputs=[remap.get(i, i) for i in node.inputs],
            attrs=dict(node.attrs),
            output_shape=None,
        )
        new_nodes.append(rewired)

        if node.kind in ACT_KINDS:
            if node.id not in bounds.act_bounds:
                raise PassError(f"node {node.id}: no bound for activation node")
            low, up = bounds.act_bounds[node.id]
            emit_clip(rewired, low, up)
            bound_of[node.id] = (low, up)
            is_act_source[node.id] = True
        elif node.kind in _CHAIN_KINDS:
            src = node.inputs[0]
            if src in bound_of and (extension == "transitive" or is_act_source[src]):
                low, up = bound_of[src]
                emit_clip(rewired, low, up)
                bound_of[node.id] = (low, up)
                is_act_source[node.id] = False
        elif node.kind == OpKind.CONCAT:
            if extension == "transitive":
                srcs = [i for i in node.inputs if i in bound_of]
            else:
                srcs = [i for i in node.inputs if i in bound_of and is_act_source[i]]
            if srcs:
                # only bounded branches contribute to the merged range
                low = min(bound_of[i][0] for i in srcs)
                up = max(bound_of[i][1] for i in srcs)
                emit_clip(rewired, low, up)
                bound_of[node.id] = (low, up)
                is_act_source[node.id] = False

    out = Graph(
        new_nodes,
        remap.get(graph.output_id, graph.output_id),
        graph.task,
        graph.weights,
    )
    return infer_shapes(out)


def act_swap(graph: Graph, from_kind: OpKind, to_kind: OpKind) -> Graph:
    """Replace every from_kind activation with to_kind; weights untouched."""
    if from_kind not in ACT_KINDS or to_kind not in ACT_KINDS:
        raise PassError("act_swap operates on activation kinds only")
    new_nodes = [
        replace(n, kind=to_kind) if n.kind == from_kind else n for n in graph.nodes
    ]
    return infer_shapes(Graph(new_nodes, graph.output_id, graph.task, graph.weights))


def instrumentation_delta(original: Graph, instrumented: Graph) -> dict:
    """Node and element deltas introduced by guard insertion."""
    clips = [n for n in instrumented.nodes if n.kind == OpKind.CLIP]
    elements = sum(int(np.prod(c.output_shape)) for c in clips)
    return {
        "clip_nodes": len(clips),
        "node_delta": len(instrumented.nodes) - len(original.nodes),
        "bounded_elements": elements,
    }
