"""Derives per-activation-layer restriction bounds from sample data.

For each activation node the profiler pools every output element observed
over the sample set and takes a nearest-rank percentile as the upper bound
(the exact maximum at percentile 100). ReLU lower bounds are 0; inherently
bounded activations (Tanh) bypass sampling and get (-1, 1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import infer_trace
from .graph import ACT_KINDS, Graph, OpKind
from .numerics import FLOAT32, NumericFormat


class ProfilerError(ValueError):
    pass


@dataclass
class BoundSet:
    """(low, up) per activation node id, plus how the bounds were derived."""

    act_bounds: dict[int, tuple[float, float]]
    percentile: float
    sample_count: int

    def __post_init__(self):
        for node_id, (low, up) in self.act_bounds.items():
            if low > up:
                raise ProfilerError(f"node {node_id}: low {low} > up {up}")

    def to_json(self) -> dict:
        return {
            "percentile": self.percentile,
            "sample_count": self.sample_count,
            "bounds": {str(k): [lo, up] for k, (lo, up) in self.act_bounds.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BoundSet":
        return cls(
            {int(k): (float(v[0]), float(v[1])) for k, v in obj["bounds"].items()},
            float(obj["percentile"]),
            int(obj.get("sample_count", 0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "BoundSet":
        return cls.from_json(json.loads(Path(path).read_text()))


def nearest_rank(sorted_values: np.ndarray, percentile: float) -> float:
    """p-th nearest-rank percentile of an ascending array."""
    n = len(sorted_values)
    if n == 0:
        raise ProfilerError("no values to take a percentile of")
    rank = max(1, math.ceil(percentile / 100.0 * n))
    return float(sorted_values[min(rank, n) - 1])


class _LayerAggregate:
    """Mergeable per-layer statistics: exact max/min plus an optional reservoir.

    At percentile 100 only the exact extremes are used, so worker merges are
    order-insensitive. Below 100 a bounded reservoir (algorithm R with a
    node-seeded generator) approximates the pooled multiset.
    """

    def __init__(self, node_id: int, keep_values: bool, capacity: int, seed: int):
        self.node_id = node_id
        self.keep_values = keep_values
        self.capacity = capacity
        self.rng = np.random.default_rng([seed, node_id])
        self.count = 0
        self.vmax = -math.inf
        self.vmin = math.inf
        self.values: list[np.ndarray] = []
        self._held = 0

    def update(self, arr: np.ndarray) -> None:
        flat = np.asarray(arr, dtype=np.float64).reshape(-1)
        self.count += flat.size
        self.vmax = max(self.vmax, float(flat.max()))
        self.vmin = min(self.vmin, float(flat.min()))
        if not self.keep_values:
            return
        if self._held + flat.size <= self.capacity:
            self.values.append(flat)
            self._held += flat.size
            return
        pool = np.concatenate(self.values + [flat]) if self.values else flat
        if len(pool) > self.capacity:
            seen_before = self.count - flat.size
            if seen_before <= self.capacity:
                # first overflow: uniform subsample of everything seen so far
                idx = self.rng.choice(len(pool), size=self.capacity, replace=False)
                pool = pool[np.sort(idx)]
            else:
                keep = self.rng.random(len(pool)) < self.capacity / self.count
                pool = pool[keep][: self.capacity]
        self.values = [pool]
        self._held = len(pool)

    def merge(self, other: "_LayerAggregate") -> None:
        self.count += other.count
        self.vmax = max(self.vmax, other.vmax)
        self.vmin = min(self.vmin, other.vmin)
        if self.keep_values:
            for v in other.values:
                self.values.append(v)
                self._held += v.size
            if self._held > self.capacity:
                pool = np.concatenate(self.values)
                idx = self.rng.choice(len(pool), size=self.capacity, replace=False)
                self.values = [pool[np.sort(idx)]]
                self._held = self.capacity

    def pooled(self) -> np.ndarray:
        return np.sort(np.concatenate(self.values)) if self.values else np.array([])


def act_nodes(graph: Graph) -> list:
    return [n for n in graph.nodes if n.kind in ACT_KINDS]


def profile_bounds(
    graph: Graph,
    samples,
    percentile: float = 100.0,
    fmt: NumericFormat = FLOAT32,
    reservoir_size: int = 1_000_000,
    seed: int = 0,
) -> BoundSet:
    """Run the graph over every sample and derive per-ACT-layer bounds."""
    if not 0.0 < percentile <= 100.0:
        raise ProfilerError(f"percentile {percentile} out of (0, 100]")
    acts = act_nodes(graph)
    sampled = [n for n in acts if n.kind != OpKind.TANH]
    keep = percentile < 100.0
    aggs = {
        n.id: _LayerAggregate(n.id, keep, reservoir_size, seed) for n in sampled
    }
    retain = [n.id for n in sampled]
    count = 0
    for sample in samples:
        count += 1
        _, trace = infer_trace(graph, sample, fmt, retain_ids=retain)
        for nid in retain:
            aggs[nid].update(trace.outputs[nid].to_floats())
    if count == 0:
        raise ProfilerError("empty sample set")

    bounds: dict[int, tuple[float, float]] = {}
    for n in acts:
        if n.kind == OpKind.TANH:
            bounds[n.id] = (-1.0, 1.0)  # inherent range, no sampling needed
            continue
        agg = aggs[n.id]
        if percentile == 100.0:
            up = agg.vmax
            low = 0.0 if n.kind == OpKind.RELU else agg.vmin
        else:
            pool = agg.pooled()
            up = nearest_rank(pool, percentile)
            # mirrored lower-tail rank for activations without a natural floor
            low = 0.0 if n.kind == OpKind.RELU else -nearest_rank(-pool[::-1], percentile)
        bounds[n.id] = (min(low, up), up)
    return BoundSet(bounds, percentile, count)


def bound_convergence_report(
    graph: Graph,
    samples,
    checkpoints: list[int],
    fmt: NumericFormat = FLOAT32,
) -> dict[int, list[float]]:
    """Running per-layer maxima at each checkpoint, normalized to the final one.

    Produces the data behind bound-convergence plots: values per activation
    layer are non-decreasing and end at 1.0.
    """
    cps = [int(c) for c in checkpoints]
    if not cps or cps != sorted(cps) or cps[0] < 1:
        raise ProfilerError("checkpoints must be ascending positive sample counts")
    acts = [n for n in act_nodes(graph) if n.kind != OpKind.TANH]
    retain = [n.id for n in acts]
    running = {nid: -math.inf for nid in retain}
    table: dict[int, list[float]] = {nid: [] for nid in retain}
    seen = 0
    next_cp = 0
    for sample in samples:
        seen += 1
        _, trace = infer_trace(graph, sample, fmt, retain_ids=retain)
        for nid in retain:
            running[nid] = max(running[nid], float(trace.outputs[nid].to_floats().max()))
        while next_cp < len(cps) and cps[next_cp] == seen:
            for nid in retain:
                table[nid].append(running[nid])
            next_cp += 1
        if next_cp == len(cps):
            break
    if next_cp < len(cps):
        raise ProfilerError(
            f"sample set exhausted at {seen} before checkpoint {cps[next_cp]}"
        )
    for nid in retain:
        final = table[nid][-1]
        table[nid] = [v / final if final != 0 else 1.0 for v in table[nid]]
    return table
