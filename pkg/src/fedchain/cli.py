"""Command line: address generation, running a node, deterministic
simulation, and the federated-vs-centralized accuracy benchmark."""

import argparse
import json
import logging
import math
import os
import random
import signal
import sys
from dataclasses import dataclass
from pathlib import Path

from .chain import address_of
from .fedavg import aggregate
from .net import BootstrapError, SimConfig
from .node import (
    ConfigError,
    UdpNodeRunner,
    derive_seed,
    load_node_config,
    parse_config_text,
    run_simulation,
)
from .params import ModelConfig
from .trainer import TrainSpec, evaluate, init_params, synthetic_blobs, train_local

log = logging.getLogger("fedchain.cli")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


# --- keygen ------------------------------------------------------------------


def cmd_keygen(args) -> int:
    seed = args.seed
    if seed is None:
        seed = int.from_bytes(os.urandom(8), "little")
    identifier = random.Random(seed).randbytes(32)
    print(address_of(identifier).hex())
    return 0


# --- run ---------------------------------------------------------------------


def cmd_run(args) -> int:
    overrides = {}
    if args.roles:
        overrides["roles"] = args.roles
    try:
        config = load_node_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    runner = UdpNodeRunner(config)
    signal.signal(signal.SIGTERM, lambda signum, frame: runner.stop())
    try:
        runner.start()
    except BootstrapError as exc:
        print(f"bootstrap failed: {exc}", file=sys.stderr)
        return 1
    return runner.run()


# --- simulate ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        sim = SimConfig(args.drop, args.duplicate, args.delay, args.seed)
        summary = run_simulation(
            args.nodes,
            args.rounds,
            sim,
            trace_path=out / "trace.jsonl",
            summary_path=out / "summary.json",
        )
    except ValueError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return 2
    status = "converged" if summary["converged"] else "DIVERGED"
    print(
        f"{args.nodes} nodes, {args.rounds} rounds: {status}, "
        f"heights {summary['heights']}, final accuracy "
        f"{summary['accuracy'][-1] if summary['accuracy'] else 'n/a'}"
    )
    return 0 if summary["converged"] else 1


# --- bench -------------------------------------------------------------------

BENCH_MODEL = ModelConfig((16, 32, 4), seed=7)
BENCH_BATCH = 16
BENCH_LR = 0.05
# sized so the smallest grid cell still gives each member enough samples
# to track the centralized run
BENCH_TRAIN = 8000
BENCH_TEST = 1000
BENCH_BLOBS = {"center_spread": 0.8, "cluster_std": 0.55, "centers_per_class": 5}


@dataclass(frozen=True)
class BenchmarkSpec:
    data_fractions: tuple = (0.10, 0.25, 0.50, 0.75, 1.00)
    update_epochs: tuple = (25, 50, 75)
    model_counts: tuple = (2, 4, 8)
    total_epochs: int = 150
    seed: int = 0

    def __post_init__(self):
        if not self.data_fractions or not self.update_epochs or not self.model_counts:
            raise ValueError("benchmark lists must be non-empty")
        if any(not 0.0 < f <= 1.0 for f in self.data_fractions):
            raise ValueError("data fractions must lie in (0, 1]")
        if any(self.total_epochs % u for u in self.update_epochs):
            raise ValueError("total_epochs must be divisible by every update_epochs entry")
        if any(m < 1 for m in self.model_counts):
            raise ValueError("model counts must be >= 1")


def load_benchmark_spec(path) -> BenchmarkSpec:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    known = {"data_fractions", "update_epochs", "model_counts", "total_epochs", "seed"}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown benchmark keys: {sorted(unknown)}")
    kwargs = {}
    if "data_fractions" in values:
        kwargs["data_fractions"] = tuple(float(v) for v in values["data_fractions"].split(","))
    for key in ("update_epochs", "model_counts"):
        if key in values:
            kwargs[key] = tuple(int(v) for v in values[key].split(","))
    for key in ("total_epochs", "seed"):
        if key in values:
            kwargs[key] = int(values[key])
    return BenchmarkSpec(**kwargs)


def _federated_accuracy(train_set, test_set, update_epochs, members, total_epochs, seed) -> float:
    """FedAvg over equal disjoint member shards, synchronized every
    update_epochs local epochs."""
    per = train_set.n_samples // members
    shards = [train_set.subset(range(m * per, (m + 1) * per)) for m in range(members)]
    params = init_params(BENCH_MODEL)
    for r in range(total_epochs // update_epochs):
        updates = [
            train_local(
                BENCH_MODEL,
                params,
                shards[m],
                TrainSpec(update_epochs, BENCH_BATCH, BENCH_LR, derive_seed(seed, r, m)),
                round=r,
            )
            for m in range(members)
        ]
        params = aggregate(updates).params
    return evaluate(BENCH_MODEL, params, test_set)


def run_benchmark(spec: BenchmarkSpec) -> list[dict]:
    """All grid cells plus one centralized run per data fraction."""
    features = BENCH_MODEL.layer_sizes[0]
    classes = BENCH_MODEL.layer_sizes[-1]
    data = synthetic_blobs(
        BENCH_TRAIN + BENCH_TEST,
        features,
        classes,
        seed=derive_seed("bench-data", spec.seed),
        **BENCH_BLOBS,
    )
    train_all = data.subset(range(BENCH_TRAIN))
    test_set = data.subset(range(BENCH_TRAIN, BENCH_TRAIN + BENCH_TEST))
    granularity = math.lcm(*spec.model_counts)

    rows = []
    for fraction in spec.data_fractions:
        n = (int(BENCH_TRAIN * fraction) // granularity) * granularity
        if n < granularity * 1:
            raise ValueError(f"fraction {fraction} leaves too few samples to split")
        subset = train_all.subset(range(n))
        for update_epochs in spec.update_epochs:
            for members in spec.model_counts:
                acc = _federated_accuracy(
                    subset, test_set, update_epochs, members, spec.total_epochs, spec.seed
                )
                rows.append(
                    {
                        "fraction": fraction,
                        "update": update_epochs,
                        "models": members,
                        "accuracy": acc,
                    }
                )
        central = train_local(
            BENCH_MODEL,
            init_params(BENCH_MODEL),
            subset,
            TrainSpec(spec.total_epochs, BENCH_BATCH, BENCH_LR, derive_seed(spec.seed, 0, 0)),
        )
        rows.append(
            {
                "fraction": fraction,
                "update": spec.total_epochs,
                "models": "centralized",
                "accuracy": evaluate(BENCH_MODEL, central.params, test_set),
            }
        )
    return rows


def format_benchmark(rows) -> str:
    lines = ["fraction\tupdate\tmodels\taccuracy"]
    for row in rows:
        lines.append(
            f"{row['fraction']:g}\t{row['update']}\t{row['models']}\t{row['accuracy']:.6f}"
        )
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> int:
    try:
        spec = load_benchmark_spec(args.spec) if args.spec else BenchmarkSpec(seed=args.seed)
    except (ValueError, OSError, ConfigError) as exc:
        print(f"benchmark spec error: {exc}", file=sys.stderr)
        return 2
    rows = run_benchmark(spec)
    table = format_benchmark(rows)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        print(table, end="")
    return 0


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedchain")
    sub = parser.add_subparsers(dest="command", required=True)

    keygen = sub.add_parser("keygen", help="derive a client address")
    keygen.add_argument("--seed", type=int, default=None)
    keygen.set_defaults(func=cmd_keygen)

    run = sub.add_parser("run", help="run a network node until interrupted")
    run.add_argument("--config", required=True)
    run.add_argument("--roles", default=None, help="comma-separated role override")
    run.set_defaults(func=cmd_run)

    simulate = sub.add_parser("simulate", help="deterministic in-process network")
    simulate.add_argument("--nodes", type=int, required=True)
    simulate.add_argument("--rounds", type=int, required=True)
    simulate.add_argument("--drop", type=float, default=0.0)
    simulate.add_argument("--duplicate", type=float, default=0.0)
    simulate.add_argument("--delay", type=int, default=2, help="max delivery delay in ticks")
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--out", required=True, help="directory for trace and summary")
    simulate.set_defaults(func=cmd_simulate)

    bench = sub.add_parser("bench", help="federated vs centralized accuracy table")
    bench.add_argument("--spec", default=None, help="benchmark spec file (key = value)")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", default=None, help="output table path (default stdout)")
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    level = LOG_LEVELS.get(os.environ.get("FEDCHAIN_LOG", "error"), logging.ERROR)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
