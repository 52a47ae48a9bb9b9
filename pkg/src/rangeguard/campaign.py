"""Fault-injection campaigns: site sampling, SDC classification, statistics.

A campaign runs one fault per execution against every configured graph
variant, pairing trials across variants (same fault site sequence) so
variant comparisons use common random numbers. Sampled mode draws sites
uniformly over all eligible output elements; exhaustive mode enumerates
every (node, element, bit-set) site and yields the exact SDC rate.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .engine import FaultSpec, count_flops, infer, infer_with_fault
from .graph import Graph, OpKind, TaskSpec
from .numerics import FLOAT32, NumericFormat, Tensor

_RAD2DEG = 180.0 / math.pi


class CampaignError(ValueError):
    pass


@dataclass
class CampaignConfig:
    """Sampling plan for one fault-injection experiment."""

    variants: dict[str, Graph]
    inputs: list[np.ndarray]
    labels: list | None = None  # class indices; golden values for regression
    trials_per_input: int = 1000
    fmt: NumericFormat = FLOAT32
    seed: int = 0
    exclude_last_fc: bool = True
    bit_count: int = 1
    mode: str = "sampled"  # "sampled" | "exhaustive"
    multi_bit_scatter: bool = False  # True: k single-bit flips in k elements
    include_clip_targets: bool = False
    workers: int = 1
    log_path: str | None = None

    def __post_init__(self):
        if not self.variants:
            raise CampaignError("no graph variants")
        if not self.inputs:
            raise CampaignError("no inputs")
        if self.trials_per_input < 1:
            raise CampaignError("trials_per_input must be >= 1")
        if not 1 <= self.bit_count <= 5:
            raise CampaignError("bit_count must be in 1..5")
        if self.mode not in ("sampled", "exhaustive"):
            raise CampaignError(f"unknown mode {self.mode!r}")
        tasks = {json.dumps(g.task.to_json()) for g in self.variants.values()}
        if len(tasks) != 1:
            raise CampaignError("variants disagree on task spec")


@dataclass
class Outcome:
    """Classification of one trial against the golden run."""

    detectable: bool
    sdc_by_threshold: dict[float, bool] = field(default_factory=dict)
    sdc_fraction: float = 0.0  # 1/0 for classification; mean over thresholds else

    @property
    def masked_fraction(self) -> float:
        return 0.0 if self.detectable else 1.0 - self.sdc_fraction


@dataclass
class VariantStats:
    """Aggregated outcome counts for one graph variant."""

    variant: str
    n: int = 0
    sdc_weight: float = 0.0
    masked_weight: float = 0.0
    detectable: int = 0
    per_threshold: dict[float, int] = field(default_factory=dict)
    per_bit: dict[int, list[int]] = field(default_factory=dict)  # bit -> [sdc, total]
    flops: int = 0

    def add(self, outcome: Outcome, bits: tuple[int, ...]) -> None:
        self.n += 1
        if outcome.detectable:
            self.detectable += 1
        else:
            self.sdc_weight += outcome.sdc_fraction
            self.masked_weight += outcome.masked_fraction
        for t, is_sdc in outcome.sdc_by_threshold.items():
            self.per_threshold[t] = self.per_threshold.get(t, 0) + int(is_sdc)
        for b in bits:
            cell = self.per_bit.setdefault(b, [0, 0])
            cell[0] += int((not outcome.detectable) and outcome.sdc_fraction > 0)
            cell[1] += 1

    def merge(self, other: "VariantStats") -> None:
        self.n += other.n
        self.sdc_weight += other.sdc_weight
        self.masked_weight += other.masked_weight
        self.detectable += other.detectable
        for t, c in other.per_threshold.items():
            self.per_threshold[t] = self.per_threshold.get(t, 0) + c
        for b, (s, tot) in other.per_bit.items():
            cell = self.per_bit.setdefault(b, [0, 0])
            cell[0] += s
            cell[1] += tot

    @property
    def sdc_rate(self) -> float:
        return self.sdc_weight / self.n if self.n else 0.0

    @property
    def masked_rate(self) -> float:
        return self.masked_weight / self.n if self.n else 0.0

    @property
    def detectable_rate(self) -> float:
        return self.detectable / self.n if self.n else 0.0

    @property
    def ci95(self) -> float:
        return ci_half_width(self.sdc_rate, self.n)

    def threshold_rate(self, t: float) -> float:
        return self.per_threshold.get(t, 0) / self.n if self.n else 0.0

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "n": self.n,
            "sdc": self.sdc_rate,
            "masked": self.masked_rate,
            "detectable": self.detectable_rate,
            "ci95": self.ci95,
            "per_threshold": {
                str(t): {
                    "sdc": self.threshold_rate(t),
                    "ci95": ci_half_width(self.threshold_rate(t), self.n),
                }
                for t in sorted(self.per_threshold)
            },
            "per_bit_histogram": {
                str(b): {"sdc": s, "total": tot}
                for b, (s, tot) in sorted(self.per_bit.items())
            },
            "flops": self.flops,
        }


@dataclass
class CampaignResult:
    variants: dict[str, VariantStats]
    mode: str
    fmt_name: str
    seed: int
    bit_count: int

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "format": self.fmt_name,
            "seed": self.seed,
            "bits": self.bit_count,
            "variants": [self.variants[k].to_json() for k in self.variants],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    def table(self) -> str:
        lines = [
            f"{'variant':<14} {'n':>8} {'SDC':>9} {'masked':>9} "
            f"{'detect':>9} {'ci95':>9} {'FLOPs':>12}"
        ]
        for s in self.variants.values():
            lines.append(
                f"{s.variant:<14} {s.n:>8} {s.sdc_rate:>9.4f} {s.masked_rate:>9.4f} "
                f"{s.detectable_rate:>9.4f} {s.ci95:>9.4f} {s.flops:>12}"
            )
        return "\n".join(lines)


def ci_half_width(p: float, n: int) -> float:
    """95% normal-approximation half width: 1.96 * sqrt(p(1-p)/n)."""
    if n <= 0:
        return 0.0
    return 1.96 * math.sqrt(p * (1.0 - p) / n)


# -- fault sites -----------------------------------------------------


def eligible_sites(
    graph: Graph, exclude_last_fc: bool = True, include_clip: bool = False
) -> list[tuple[int, int]]:
    """(node_id, element_count) pairs eligible for injection, in topo order."""
    excluded = graph.last_fc_ids() if exclude_last_fc else frozenset()
    sites = []
    for n in graph.nodes:
        if n.kind in (OpKind.INPUT, OpKind.CONSTANT):
            continue  # not operator computations
        if n.kind == OpKind.CLIP and not include_clip:
            continue
        if n.id in excluded:
            continue
        sites.append((n.id, int(np.prod(n.output_shape))))
    if not sites:
        raise CampaignError("no eligible fault sites")
    return sites


def sample_fault(
    sites: list[tuple[int, int]],
    width: int,
    bit_count: int,
    rng: np.random.Generator,
    trial_index: int = 0,
) -> FaultSpec:
    """Uniform over (element across all eligible nodes) x (k-subset of bits)."""
    counts = np.array([c for _, c in sites], dtype=np.int64)
    total = int(counts.sum())
    r = int(rng.integers(total))
    node_idx = int(np.searchsorted(np.cumsum(counts), r, side="right"))
    element = r - int(np.concatenate([[0], np.cumsum(counts)])[node_idx])
    bits = tuple(sorted(int(b) for b in rng.choice(width, size=bit_count, replace=False)))
    return FaultSpec(sites[node_idx][0], element, bits, trial_index)


def trial_rng(seed: int, trial_index: int) -> np.random.Generator:
    """Per-trial generator; schedule-independent and reproducible."""
    return np.random.default_rng([seed, trial_index])


# -- outcome classification ------------------------------------------


def _topk(scores: np.ndarray, k: int) -> list[int]:
    # ties broken toward the lower class index
    order = sorted(range(scores.size), key=lambda i: (-scores[i], i))
    return order[:k]


def classify_outcome(golden: Tensor, faulty: Tensor, task: TaskSpec) -> Outcome:
    """Compare one faulty run against the golden run under the task spec."""
    if golden.shape != faulty.shape:
        raise CampaignError(
            f"shape mismatch: golden {golden.shape} vs faulty {faulty.shape}"
        )
    fvals = faulty.to_floats().reshape(-1).astype(np.float64)
    gvals = golden.to_floats().reshape(-1).astype(np.float64)
    if not np.all(np.isfinite(fvals)):
        return Outcome(detectable=True)

    if task.kind == "classification":
        golden_top1 = _topk(gvals, 1)[0]
        is_sdc = golden_top1 not in _topk(fvals, task.topk)
        return Outcome(False, {}, 1.0 if is_sdc else 0.0)

    scale = _RAD2DEG if task.unit == "radians" else 1.0
    dev = abs(float(fvals[0]) - float(gvals[0])) * scale
    by_threshold = {t: dev > t for t in task.sdc_thresholds}
    frac = sum(by_threshold.values()) / len(by_threshold)
    return Outcome(False, by_threshold, frac)


# -- campaign execution ----------------------------------------------


def _golden_outputs(config: CampaignConfig) -> dict[str, list[Tensor]]:
    golden: dict[str, list[Tensor]] = {}
    task = next(iter(config.variants.values())).task
    for name, g in config.variants.items():
        outs = [infer(g, x, config.fmt) for x in config.inputs]
        golden[name] = outs
        if task.kind == "classification" and config.labels is not None:
            for i, out in enumerate(outs):
                pred = _topk(out.to_floats().reshape(-1), 1)[0]
                if pred != int(config.labels[i]):
                    raise CampaignError(
                        f"variant {name}: input {i} not correctly predicted "
                        f"(got {pred}, want {config.labels[i]})"
                    )
    return golden


def _enumerate_trials(config: CampaignConfig, sites) -> list[tuple[int, FaultSpec]]:
    """Exhaustive site list: every (input, node, element, bit-set)."""
    width = config.fmt.width
    bit_sets = list(combinations(range(width), config.bit_count))
    trials = []
    t = 0
    for i in range(len(config.inputs)):
        for node_id, count in sites:
            for e in range(count):
                for bits in bit_sets:
                    trials.append((i, FaultSpec(node_id, e, bits, t)))
                    t += 1
    return trials


def _sampled_trial(config: CampaignConfig, sites, trial: int) -> tuple[int, FaultSpec]:
    rng = trial_rng(config.seed, trial)
    input_idx = trial // config.trials_per_input
    return input_idx, sample_fault(sites, config.fmt.width, config.bit_count, rng, trial)


def _scatter_faults(
    config: CampaignConfig, sites, trial: int
) -> tuple[int, list[FaultSpec]]:
    """Multi-value mode: bit_count single-bit flips at distinct elements of one op."""
    rng = trial_rng(config.seed, trial)
    input_idx = trial // config.trials_per_input
    first = sample_fault(sites, config.fmt.width, 1, rng, trial)
    count = dict(sites)[first.target_op]
    k = min(config.bit_count, count)
    elements = rng.choice(count, size=k, replace=False)
    faults = [
        FaultSpec(first.target_op, int(e), (int(rng.integers(config.fmt.width)),), trial)
        for e in elements
    ]
    return input_idx, faults


def _run_trial_on_variant(
    graph: Graph,
    golden: Tensor,
    x: np.ndarray,
    faults: list[FaultSpec],
    config: CampaignConfig,
) -> Outcome:
    if len(faults) == 1:
        out, _ = infer_with_fault(
            graph,
            x,
            faults[0],
            config.fmt,
            exclude_last_fc=config.exclude_last_fc,
            allow_clip_target=config.include_clip_targets,
        )
    else:
        out = _infer_with_scatter(graph, x, faults, config)
    return classify_outcome(golden, out, graph.task)


def _infer_with_scatter(
    graph: Graph, x, faults: list[FaultSpec], config: CampaignConfig
) -> Tensor:
    """Apply several single-bit flips to one node's stored output in one pass."""
    from .engine import _apply_fault, _as_input_array, _eval_node, _prepared_weights

    if len({f.target_op for f in faults}) != 1:
        raise CampaignError("scatter faults must target one node")
    target = faults[0].target_op
    weights = _prepared_weights(graph, config.fmt)
    acts: dict[int, np.ndarray] = {}
    x0 = _as_input_array(graph, x, config.fmt)
    for node in graph.nodes:
        if node.kind == OpKind.INPUT:
            arr = x0
        else:
            arr = _eval_node(graph, node, acts, weights, config.fmt)
        if node.id == target:
            for f in faults:
                arr = _apply_fault(arr, f, config.fmt)
        acts[node.id] = arr
    out = acts[graph.output_id]
    return Tensor(out.shape, config.fmt, out)


def _process_trials(
    config: CampaignConfig,
    sites,
    golden: dict[str, list[Tensor]],
    trial_specs: list[tuple[int, int, list[FaultSpec]]],
) -> dict[str, VariantStats]:
    stats = {name: VariantStats(name) for name in config.variants}
    log = open(config.log_path, "a") if config.log_path else None
    try:
        for trial, input_idx, faults in trial_specs:
            record = {
                "trial": trial,
                "input": input_idx,
                "node": faults[0].target_op,
                "elements": [f.element_index for f in faults],
                "bits": sorted({b for f in faults for b in f.bit_positions}),
                "outcomes": {},
            }
            bits_for_hist = tuple(record["bits"])
            for name, graph in config.variants.items():
                outcome = _run_trial_on_variant(
                    graph, golden[name][input_idx], config.inputs[input_idx], faults, config
                )
                stats[name].add(outcome, bits_for_hist)
                record["outcomes"][name] = (
                    "detectable"
                    if outcome.detectable
                    else ("sdc" if outcome.sdc_fraction > 0 else "masked")
                )
            if log:
                log.write(json.dumps(record) + "\n")
    finally:
        if log:
            log.close()
    return stats


def _build_trial_specs(config: CampaignConfig, sites) -> list[tuple[int, int, list[FaultSpec]]]:
    specs: list[tuple[int, int, list[FaultSpec]]] = []
    if config.mode == "exhaustive":
        for trial, (input_idx, fault) in enumerate(_enumerate_trials(config, sites)):
            specs.append((trial, input_idx, [fault]))
        return specs
    n_trials = config.trials_per_input * len(config.inputs)
    for trial in range(n_trials):
        if config.multi_bit_scatter and config.bit_count > 1:
            input_idx, faults = _scatter_faults(config, sites, trial)
        else:
            input_idx, fault = _sampled_trial(config, sites, trial)
            faults = [fault]
        specs.append((trial, input_idx, faults))
    return specs


def _completed_trials(log_path: str | None) -> set[int]:
    if not log_path or not os.path.exists(log_path):
        return set()
    done = set()
    with open(log_path) as f:
        for line in f:
            line = line.strip()
            if line:
                done.add(json.loads(line)["trial"])
    return done


_WORKER_STATE: dict = {}


def _worker_init(config, sites, golden):
    _WORKER_STATE["args"] = (config, sites, golden)


def _worker_run(chunk):
    config, sites, golden = _WORKER_STATE["args"]
    return _process_trials(config, sites, golden, chunk)


def run_campaign(config: CampaignConfig) -> CampaignResult:
    """Execute the campaign and aggregate per-variant statistics."""
    site_lists = {
        name: eligible_sites(g, config.exclude_last_fc, config.include_clip_targets)
        for name, g in config.variants.items()
    }
    unique = {tuple(s) for s in site_lists.values()}
    if len(unique) != 1:
        raise CampaignError(
            "variants expose different fault-site universes; instrumented "
            "graphs must preserve original node ids"
        )
    sites = next(iter(site_lists.values()))
    golden = _golden_outputs(config)
    specs = _build_trial_specs(config, sites)
    done = _completed_trials(config.log_path)
    if done:
        specs = [s for s in specs if s[0] not in done]

    if config.workers > 1 and len(specs) > 1:
        chunks = [specs[i :: config.workers] for i in range(config.workers)]
        log_path = config.log_path
        config.log_path = None  # workers do not interleave writes
        with ProcessPoolExecutor(
            max_workers=config.workers,
            initializer=_worker_init,
            initargs=(config, sites, golden),
        ) as pool:
            partials = list(pool.map(_worker_run, chunks))
        config.log_path = log_path
        stats = {name: VariantStats(name) for name in config.variants}
        for part in partials:
            for name in stats:
                stats[name].merge(part[name])
    else:
        stats = _process_trials(config, sites, golden, specs)

    for name, g in config.variants.items():
        stats[name].flops = count_flops(g).total
    return CampaignResult(
        stats, config.mode, config.fmt.name, config.seed, config.bit_count
    )


def compare_variants(
    baseline: VariantStats, protected: VariantStats
) -> dict:
    """Relative SDC-rate reduction of protected vs baseline, with guards."""

    def reduction(p_base: float, p_prot: float):
        if p_base == 0.0:
            return "n/a"
        return 1.0 - p_prot / p_base

    out = {
        "baseline": baseline.variant,
        "protected": protected.variant,
        "overall": reduction(baseline.sdc_rate, protected.sdc_rate),
        "per_threshold": {},
    }
    for t in sorted(baseline.per_threshold):
        out["per_threshold"][str(t)] = reduction(
            baseline.threshold_rate(t), protected.threshold_rate(t)
        )
    return out


def comparison_table(comparison: dict) -> str:
    def fmt(v):
        return v if isinstance(v, str) else f"{100 * v:.2f}%"

    lines = [
        f"relative SDC reduction: {comparison['protected']} vs {comparison['baseline']}",
        f"  overall: {fmt(comparison['overall'])}",
    ]
    for t, v in comparison["per_threshold"].items():
        lines.append(f"  threshold {t}: {fmt(v)}")
    return "\n".join(lines)
