"""Command-line entry point: profile -> instrument -> inject -> evaluate -> report.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every source of
randomness hangs off an explicit --seed, so reruns with identical arguments
produce identical artifacts. Experiment configs are TOML; all emitted
artifacts (bounds, manifests, reports) are JSON for diffability.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

try:  # stdlib from 3.11; this interpreter-vendored fallback covers 3.10
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    try:
        from pip._vendor import tomli as tomllib
    except ModuleNotFoundError:
        from setuptools._vendor import tomli as tomllib

from . import datasets, zoo
from .campaign import (
    CampaignConfig,
    CampaignResult,
    VariantStats,
    compare_variants,
    comparison_table,
    run_campaign,
)
from .engine import count_flops, infer
from .graph import Graph, load_model, save_model
from .numerics import CorrectionPolicy, NumericFormat
from .passes import act_swap, insert_range_guards, instrumentation_delta
from .profiler import BoundSet, bound_convergence_report, profile_bounds


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _fmt_arg(name: str) -> NumericFormat:
    return NumericFormat.from_name(name)


def _load(args) -> Graph:
    return load_model(args.model, args.weights)


def _weights_for(model_path: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    return str(Path(model_path).with_suffix(".rgwb"))


def _load_eval_data(data_dir: str, arch_kind: str, split: str):
    if arch_kind == "classification":
        return datasets.load_digit_split(data_dir, split)
    return datasets.load_steering_split(data_dir, split)


def _dataset_iter(graph: Graph, data_dir: str, split: str, limit: int | None = None):
    x, _ = _load_eval_data(data_dir, graph.task.kind, split)
    if limit:
        x = x[:limit]
    return [xi[None, ...] if xi.ndim == 3 else xi for xi in x]


def cmd_fetch(args) -> int:
    if args.dataset == "digits":
        paths = datasets.fetch_digits(args.out, seed=args.seed, val_count=args.val_count)
    else:
        paths = datasets.save_steering(
            args.out, args.train_count, args.val_count, seed=args.seed
        )
    for k, p in paths.items():
        print(f"{k}: {p}")
    return 0


def cmd_train(args) -> int:
    spec = zoo.TrainSpec(
        arch=args.arch,
        epochs=args.epochs,
        learning_rate=args.lr,
        seed=args.seed,
        data_dir=args.data,
        batch_size=args.batch,
        momentum=args.momentum,
    )
    graph, metrics = zoo.train(spec)
    save_model(graph, f"{args.out_prefix}.json", f"{args.out_prefix}.rgwb")
    print(f"trained {args.arch}: final loss {metrics['final_loss']:.6f}")
    if args.data and graph.task.kind == "classification":
        x, y = datasets.load_digit_split(args.data, "val")
        acc = zoo.evaluate_accuracy(graph, x, y)
        print(f"validation accuracy: {acc['accuracy']:.4f}")
    elif args.data and graph.task.kind == "regression":
        x, y = datasets.load_steering_split(args.data, "val")
        m = zoo.evaluate_accuracy(graph, x, y)
        print(f"validation rmse: {m['rmse']:.4f}  avg deviation: {m['avg_deviation']:.4f}")
    print(f"wrote {args.out_prefix}.json / {args.out_prefix}.rgwb")
    return 0


def cmd_profile(args) -> int:
    graph = _load(args)
    samples = _dataset_iter(graph, args.data, args.split, args.limit)
    bounds = profile_bounds(
        graph,
        samples,
        percentile=args.percentile,
        fmt=_fmt_arg(args.format),
        seed=args.seed,
    )
    bounds.save(args.out)
    print(f"profiled {len(bounds.act_bounds)} activation layers "
          f"over {bounds.sample_count} samples -> {args.out}")
    return 0


def cmd_convergence(args) -> int:
    graph = _load(args)
    samples = _dataset_iter(graph, args.data, args.split)
    checkpoints = [int(c) for c in args.checkpoints.split(",")]
    table = bound_convergence_report(graph, samples, checkpoints, _fmt_arg(args.format))
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["node_id"] + [str(c) for c in checkpoints])
        for nid, row in sorted(table.items()):
            writer.writerow([nid] + [f"{v:.6f}" for v in row])
    print(f"wrote convergence table for {len(table)} layers -> {args.out}")
    return 0


def cmd_instrument(args) -> int:
    graph = _load(args)
    bounds = BoundSet.load(args.bounds)
    guarded = insert_range_guards(
        graph,
        bounds,
        policy=CorrectionPolicy.from_name(args.policy),
        extension=args.extension,
        policy_seed=args.seed,
    )
    save_model(guarded, f"{args.out_prefix}.json", f"{args.out_prefix}.rgwb")
    delta = instrumentation_delta(graph, guarded)
    base = count_flops(graph).total
    inst = count_flops(guarded).total
    print(
        f"inserted {delta['clip_nodes']} range guards "
        f"({delta['bounded_elements']} bounded elements); "
        f"FLOPs {base} -> {inst} (+{100.0 * (inst - base) / base:.3f}%)"
    )
    print(f"wrote {args.out_prefix}.json / {args.out_prefix}.rgwb")
    return 0


def cmd_act_swap(args) -> int:
    from .graph import OpKind

    graph = _load(args)
    swapped = act_swap(graph, OpKind(args.from_kind), OpKind(args.to_kind))
    save_model(swapped, f"{args.out_prefix}.json", f"{args.out_prefix}.rgwb")
    print(f"wrote {args.out_prefix}.json / {args.out_prefix}.rgwb")
    return 0


def cmd_inject(args) -> int:
    graph = _load(args)
    variants = {"original": graph}
    if args.bounds:
        bounds = BoundSet.load(args.bounds)
        variants["instrumented"] = insert_range_guards(
            graph,
            bounds,
            policy=CorrectionPolicy.from_name(args.policy),
            extension=args.extension,
        )
    x, y = _load_eval_data(args.data, graph.task.kind, args.split)
    inputs = [xi[None, ...] if xi.ndim == 3 else xi for xi in x[: args.num_inputs]]
    labels = None
    if graph.task.kind == "classification":
        labels = [int(v) for v in y[: args.num_inputs]]
    config = CampaignConfig(
        variants=variants,
        inputs=inputs,
        labels=labels,
        trials_per_input=args.trials,
        fmt=_fmt_arg(args.format),
        seed=args.seed,
        exclude_last_fc=args.exclude_last_fc,
        bit_count=args.bits,
        mode=args.mode,
        multi_bit_scatter=args.scatter,
        workers=args.workers,
        log_path=args.log,
    )
    result = run_campaign(config)
    result.save(f"{args.out_prefix}.json")
    for name, stats in result.variants.items():
        Path(f"{args.out_prefix}.{name}.json").write_text(
            json.dumps(stats.to_json(), indent=2) + "\n"
        )
    print(result.table())
    if len(result.variants) == 2:
        base, prot = result.variants["original"], result.variants["instrumented"]
        print(comparison_table(compare_variants(base, prot)))
    print(f"wrote {args.out_prefix}.json")
    return 0


def cmd_evaluate(args) -> int:
    graph = _load(args)
    x, y = _load_eval_data(args.data, graph.task.kind, args.split)
    metrics = zoo.evaluate_accuracy(graph, x, y, _fmt_arg(args.format))
    out = json.dumps(metrics, indent=2)
    if args.out:
        Path(args.out).write_text(out + "\n")
    print(out)
    return 0


def cmd_predict(args) -> int:
    graph = _load(args)
    batch = datasets.read_rgtn(args.input)
    fmt = _fmt_arg(args.format)
    outs = []
    for xi in batch:
        xi = xi[None, ...] if xi.ndim == 3 else xi.reshape(1, -1)
        outs.append(infer(graph, xi, fmt).to_floats().reshape(-1))
    datasets.write_rgtn(args.out, np.asarray(outs, dtype=np.float32))
    print(f"wrote {len(outs)} predictions -> {args.out}")
    return 0


def _stats_from_report(path: str) -> VariantStats:
    obj = json.loads(Path(path).read_text())
    if "variants" in obj:  # combined report: take the first variant
        obj = obj["variants"][0]
    stats = VariantStats(obj["variant"])
    n = int(obj["n"])
    stats.n = n
    stats.sdc_weight = obj["sdc"] * n
    stats.masked_weight = obj["masked"] * n
    stats.detectable = round(obj["detectable"] * n)
    for t, cell in obj.get("per_threshold", {}).items():
        stats.per_threshold[float(t)] = round(cell["sdc"] * n)
    for b, cell in obj.get("per_bit_histogram", {}).items():
        stats.per_bit[int(b)] = [cell["sdc"], cell["total"]]
    stats.flops = obj.get("flops", 0)
    return stats


def cmd_report(args) -> int:
    base = _stats_from_report(args.compare[0])
    rows = []
    for path in args.compare[1:]:
        prot = _stats_from_report(path)
        comp = compare_variants(base, prot)
        print(comparison_table(comp))
        rows.append(comp)
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            writer = csv.writer(f)
            thresholds = sorted(rows[0]["per_threshold"]) if rows else []
            writer.writerow(["protected", "overall"] + [f"t{t}" for t in thresholds])
            for comp in rows:
                writer.writerow(
                    [comp["protected"], comp["overall"]]
                    + [comp["per_threshold"][t] for t in thresholds]
                )
        print(f"wrote {args.csv}")
    return 0


def cmd_experiment(args) -> int:
    with open(args.config, "rb") as f:
        cfg = tomllib.load(f)
    workdir = Path(cfg["experiment"].get("workdir", "experiment-out"))
    workdir.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["experiment"].get("seed", 0))

    ds = cfg["dataset"]
    data_dir = ds.get("dir", str(workdir / "data"))
    if ds["kind"] == "digits":
        datasets.fetch_digits(data_dir, seed=seed, val_count=int(ds.get("val_count", 1000)))
    else:
        datasets.save_steering(
            data_dir,
            int(ds.get("train_count", 4000)),
            int(ds.get("val_count", 1000)),
            seed=seed,
        )

    m = cfg["model"]
    spec = zoo.TrainSpec(
        arch=m["arch"],
        epochs=int(m.get("epochs", 30)),
        learning_rate=float(m.get("lr", 0.05)),
        seed=seed,
        data_dir=data_dir,
        batch_size=int(m.get("batch", 32)),
    )
    graph, _ = zoo.train(spec)
    save_model(graph, workdir / "model.json", workdir / "model.rgwb")

    prof = cfg.get("profile", {})
    train_x, _ = _load_eval_data(data_dir, graph.task.kind, "train")
    samples = [xi[None, ...] if xi.ndim == 3 else xi for xi in train_x]
    bounds = profile_bounds(
        graph, samples, percentile=float(prof.get("percentile", 100.0)), seed=seed
    )
    bounds.save(workdir / "bounds.json")

    inst = cfg.get("instrument", {})
    guarded = insert_range_guards(
        graph,
        bounds,
        policy=CorrectionPolicy.from_name(inst.get("policy", "to-bound")),
        extension=inst.get("extension", "transitive"),
    )
    save_model(guarded, workdir / "model_guarded.json", workdir / "model_guarded.rgwb")

    inj = cfg.get("inject", {})
    val_x, val_y = _load_eval_data(data_dir, graph.task.kind, "val")
    num_inputs = int(inj.get("inputs", 10))
    labels = None
    if graph.task.kind == "classification":
        picked, labels = _correctly_predicted(graph, val_x, val_y, num_inputs)
    else:
        picked = [xi[None, ...] for xi in val_x[:num_inputs]]
    config = CampaignConfig(
        variants={"original": graph, "instrumented": guarded},
        inputs=picked,
        labels=labels,
        trials_per_input=int(inj.get("trials", 1000)),
        fmt=_fmt_arg(inj.get("format", "fixed32")),
        seed=seed,
        exclude_last_fc=bool(inj.get("exclude_last_fc", True)),
        bit_count=int(inj.get("bits", 1)),
        workers=int(inj.get("workers", 1)),
    )
    result = run_campaign(config)
    result.save(workdir / "report.json")
    print(result.table())
    base, prot = result.variants["original"], result.variants["instrumented"]
    print(comparison_table(compare_variants(base, prot)))
    print(f"artifacts in {workdir}")
    return 0


def _correctly_predicted(graph: Graph, x, y, count: int):
    """First `count` validation inputs the fault-free model predicts correctly."""
    picked, labels = [], []
    for xi, yi in zip(x, y):
        sample = xi[None, ...] if xi.ndim == 3 else xi
        scores = infer(graph, sample).to_floats().reshape(-1)
        order = sorted(range(scores.size), key=lambda i: (-scores[i], i))
        if order[0] == int(yi):
            picked.append(sample)
            labels.append(int(yi))
            if len(picked) == count:
                break
    if len(picked) < count:
        raise RuntimeError(f"only {len(picked)} correctly predicted inputs available")
    return picked, labels


def build_parser() -> _Parser:
    p = _Parser(prog="rangeguard", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common_model(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--weights", default=None)

    sp = sub.add_parser("fetch", help="materialize a dataset")
    sp.add_argument("--dataset", choices=["digits", "steering"], required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--val-count", type=int, default=1000)
    sp.add_argument("--train-count", type=int, default=4000)
    sp.set_defaults(func=cmd_fetch)

    sp = sub.add_parser("train", help="train a zoo architecture")
    sp.add_argument("--arch", choices=list(zoo.ARCHITECTURES), required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-prefix", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("profile", help="derive activation bounds")
    common_model(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--percentile", type=float, default=100.0)
    sp.add_argument("--format", default="float32")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("convergence", help="bound convergence table")
    common_model(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--checkpoints", required=True)
    sp.add_argument("--format", default="float32")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_convergence)

    sp = sub.add_parser("instrument", help="insert range guards")
    common_model(sp)
    sp.add_argument("--bounds", required=True)
    sp.add_argument("--policy", default="to-bound",
                    choices=[c.value for c in CorrectionPolicy])
    sp.add_argument("--extension", default="transitive",
                    choices=["transitive", "one-hop"])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-prefix", required=True)
    sp.set_defaults(func=cmd_instrument)

    sp = sub.add_parser("act-swap", help="swap activation kinds (baseline)")
    common_model(sp)
    sp.add_argument("--from-kind", default="ReLU")
    sp.add_argument("--to-kind", default="Tanh")
    sp.add_argument("--out-prefix", required=True)
    sp.set_defaults(func=cmd_act_swap)

    sp = sub.add_parser("inject", help="run a fault-injection campaign")
    common_model(sp)
    sp.add_argument("--bounds", default=None)
    sp.add_argument("--policy", default="to-bound",
                    choices=[c.value for c in CorrectionPolicy])
    sp.add_argument("--extension", default="transitive",
                    choices=["transitive", "one-hop"])
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--num-inputs", type=int, default=10)
    sp.add_argument("--trials", type=int, default=5000)
    sp.add_argument("--bits", type=int, default=1)
    sp.add_argument("--scatter", action="store_true",
                    help="multi-bit flips hit distinct elements instead of one")
    sp.add_argument("--format", default="fixed32")
    sp.add_argument("--mode", choices=["sampled", "exhaustive"], default="sampled")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--exclude-last-fc", dest="exclude_last_fc",
                    action="store_true", default=True)
    sp.add_argument("--include-last-fc", dest="exclude_last_fc", action="store_false")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--log", default=None)
    sp.add_argument("--out-prefix", required=True)
    sp.set_defaults(func=cmd_inject)

    sp = sub.add_parser("evaluate", help="task metrics on a dataset split")
    common_model(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--format", default="float32")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", help="raw model outputs for a tensor batch")
    common_model(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--format", default="float32")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("report", help="compare campaign reports")
    sp.add_argument("--compare", nargs="+", required=True)
    sp.add_argument("--csv", default=None)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("experiment", help="full pipeline from a TOML config")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_experiment)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if hasattr(args, "weights"):
        args.weights = _weights_for(args.model, args.weights)
    try:
        return args.func(args)
    except Exception as e:  # runtime failures exit 2 with the cause
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
