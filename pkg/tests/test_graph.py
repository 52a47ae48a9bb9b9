import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rangeguard.graph import (
    Graph,
    GraphError,
    Node,
    OpKind,
    TaskSpec,
    infer_shapes,
    load_model,
    load_weights_blob,
    save_model,
    save_weights_blob,
    structurally_equal,
)

GOLDEN_DIR = Path(__file__).parent / "golden"


def minimal_graph() -> Graph:
    """Input[1,4] -> FullyConnected(4->2) -> ReLU."""
    w = np.arange(8, dtype=np.float32).reshape(4, 2)
    nodes = [
        Node(0, OpKind.INPUT, {"shape": [1, 4]}),
        Node(1, OpKind.FULLY_CONNECTED, {}, [0], "fc.w"),
        Node(2, OpKind.RELU, {}, [1]),
    ]
    return infer_shapes(
        Graph(nodes, 2, TaskSpec("classification", num_classes=2), {"fc.w": w})
    )


def test_minimal_graph_shapes():
    g = minimal_graph()
    assert len(g.nodes) == 3
    assert g.node(2).output_shape == (1, 2)


def test_forward_reference_rejected():
    nodes = [
        Node(0, OpKind.INPUT, {"shape": [1, 4]}),
        Node(1, OpKind.RELU, {}, [2]),  # references a later id
        Node(2, OpKind.RELU, {}, [0]),
    ]
    g = Graph(nodes, 2, TaskSpec("classification", num_classes=2), {})
    with pytest.raises(GraphError, match="forward reference"):
        g.validate()


def test_empty_graph_rejected():
    g = Graph([], 0, TaskSpec("classification", num_classes=2), {})
    with pytest.raises(GraphError, match="no output node"):
        g.validate()


def test_dangling_weights_ref():
    nodes = [
        Node(0, OpKind.INPUT, {"shape": [1, 4]}),
        Node(1, OpKind.FULLY_CONNECTED, {}, [0], "missing"),
    ]
    g = Graph(nodes, 1, TaskSpec("classification", num_classes=2), {})
    with pytest.raises(GraphError, match="dangling"):
        g.validate()


# -- shape inference ---------------------------------------------------


def _shape_of(kind, attrs, in_shapes, weights=None):
    nodes = [
        Node(i, OpKind.INPUT, {"shape": list(s)}) for i, s in enumerate(in_shapes)
    ]
    nid = len(in_shapes)
    nodes.append(Node(nid, kind, attrs, list(range(len(in_shapes)))))
    # a single-input placeholder cannot be the only node; tolerate odd arities
    g = Graph(nodes, nid, TaskSpec("classification", num_classes=2), weights or {})
    shapes = {}
    from rangeguard.graph import _infer_node_shape

    for n in nodes[:-1]:
        shapes[n.id] = tuple(n.attrs["shape"])
    return _infer_node_shape(g, nodes[-1], shapes)


def test_maxpool_shape():
    assert _shape_of(
        OpKind.MAX_POOL, {"window": 2, "stride": 2}, [(1, 4, 4, 1)]
    ) == (1, 2, 2, 1)


def test_concat_shape():
    assert _shape_of(
        OpKind.CONCAT, {"axis": 3}, [(1, 2, 2, 3), (1, 2, 2, 5)]
    ) == (1, 2, 2, 8)


def test_concat_mismatch_rejected():
    with pytest.raises(GraphError, match="concat"):
        _shape_of(OpKind.CONCAT, {"axis": 3}, [(1, 2, 2, 3), (1, 3, 2, 5)])


def test_concat_generalizes_to_k_inputs():
    assert _shape_of(
        OpKind.CONCAT, {"axis": 1}, [(1, 2), (1, 3), (1, 4)]
    ) == (1, 9)


def test_reshape_product_checked():
    with pytest.raises(GraphError, match="reshape"):
        _shape_of(OpKind.RESHAPE, {"shape": [1, 5]}, [(1, 4)])


def test_conv_same_padding_shape():
    w = np.zeros((3, 3, 1, 2), dtype=np.float32)
    assert _shape_of(
        OpKind.CONV2D,
        {"stride": 1, "padding": "same"},
        [(1, 4, 4, 1)],
        {None: w},
    ) == (1, 4, 4, 2)


def test_shape_inference_deterministic():
    g = minimal_graph()
    a = infer_shapes(g)
    b = infer_shapes(g)
    assert [n.output_shape for n in a.nodes] == [n.output_shape for n in b.nodes]


# -- serialization -----------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    g = minimal_graph()
    save_model(g, tmp_path / "m.json", tmp_path / "m.rgwb")
    g2 = load_model(tmp_path / "m.json", tmp_path / "m.rgwb")
    assert structurally_equal(g, g2)


def test_save_load_save_byte_identical(tmp_path):
    g = minimal_graph()
    save_model(g, tmp_path / "a.json", tmp_path / "a.rgwb")
    g2 = load_model(tmp_path / "a.json", tmp_path / "a.rgwb")
    save_model(g2, tmp_path / "b.json", tmp_path / "b.rgwb")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.rgwb").read_bytes() == (tmp_path / "b.rgwb").read_bytes()


def test_golden_manifest_roundtrip(tmp_path):
    """Frozen golden files: the on-disk format must not drift."""
    manifest = GOLDEN_DIR / "minimal.json"
    blob = GOLDEN_DIR / "minimal.rgwb"
    g = load_model(manifest, blob)
    save_model(g, tmp_path / "m.json", tmp_path / "m.rgwb")
    assert (tmp_path / "m.json").read_bytes() == manifest.read_bytes()
    assert (tmp_path / "m.rgwb").read_bytes() == blob.read_bytes()


def test_clip_bounds_full_precision(tmp_path):
    g = minimal_graph()
    nodes = list(g.nodes) + [
        Node(3, OpKind.CLIP, {"low": 0.0, "up": 7.300000190734863, "policy": "to-bound"}, [2])
    ]
    g2 = infer_shapes(Graph(nodes, 3, g.task, g.weights))
    save_model(g2, tmp_path / "c.json", tmp_path / "c.rgwb")
    text = (tmp_path / "c.json").read_text()
    assert "7.300000190734863" in text  # repr round-trips the exact float
    g3 = load_model(tmp_path / "c.json", tmp_path / "c.rgwb")
    assert g3.node(3).attrs["up"] == 7.300000190734863


def test_malformed_manifest(tmp_path):
    (tmp_path / "bad.json").write_text("{nope")
    save_weights_blob({}, tmp_path / "w.rgwb")
    with pytest.raises(GraphError, match="malformed"):
        load_model(tmp_path / "bad.json", tmp_path / "w.rgwb")


def test_bad_blob_magic(tmp_path):
    (tmp_path / "w.rgwb").write_bytes(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(GraphError, match="magic"):
        load_weights_blob(tmp_path / "w.rgwb")


def test_unknown_kind_named_in_error(tmp_path):
    manifest = {
        "nodes": [{"id": 0, "kind": "Bogus", "attrs": {}, "inputs": [], "weights": None}],
        "output": 0,
        "task": {"kind": "classification", "num_classes": 2, "topk": 1},
    }
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    save_weights_blob({}, tmp_path / "w.rgwb")
    with pytest.raises(GraphError, match="node 0"):
        load_model(tmp_path / "m.json", tmp_path / "w.rgwb")


# -- task spec ---------------------------------------------------------


def test_thresholds_must_ascend():
    with pytest.raises(GraphError):
        TaskSpec("regression", sdc_thresholds=(30.0, 15.0))
    with pytest.raises(GraphError):
        TaskSpec("regression", sdc_thresholds=(-5.0, 15.0))


def test_regression_task_roundtrip():
    t = TaskSpec("regression", sdc_thresholds=(15.0, 30.0, 60.0, 120.0), unit="radians")
    assert TaskSpec.from_json(t.to_json()) == t


# -- construction fuzzing ----------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["relu", "tanh", "clip"]), max_size=6), st.integers(2, 6))
def test_random_elementwise_chains_validate(kinds, width):
    nodes = [Node(0, OpKind.INPUT, {"shape": [1, width]})]
    for i, k in enumerate(kinds, start=1):
        if k == "relu":
            nodes.append(Node(i, OpKind.RELU, {}, [i - 1]))
        elif k == "tanh":
            nodes.append(Node(i, OpKind.TANH, {}, [i - 1]))
        else:
            nodes.append(Node(i, OpKind.CLIP, {"low": -1.0, "up": 1.0}, [i - 1]))
    g = Graph(nodes, len(nodes) - 1, TaskSpec("classification", num_classes=2), {})
    g2 = infer_shapes(g)
    # iteration in list order never reads an undefined input
    seen = set()
    for n in g2.nodes:
        assert all(i in seen for i in n.inputs)
        seen.add(n.id)
        assert n.output_shape == (1, width)
