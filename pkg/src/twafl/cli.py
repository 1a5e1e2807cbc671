"""Command-line entry point.

Exit status: 0 success, 2 invalid config or arguments, 3 I/O failure,
4 malformed input data.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .data import CapacityError, IdxConsistencyError, IdxFormatError, write_partition_table
from .experiments import (
    BatchSpec, atomic_write, build_pool, compare_variants, comparison_text, parse_seeds,
    read_batch_file, records_text, run_batch,
)
from .metrics import fmt, summarize_run
from .model import dense_spec, har_lstm_spec, mnist_cnn_spec, param_count, zeros_params
from .params import CheckpointFormatError, partition_sizes
from .protocol import VARIANTS, ConfigError, make_config, run_experiment, setup

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4


def _load(args) -> BatchSpec:
    spec = read_batch_file(args.config, args.out) if args.config else BatchSpec(make_config({}))
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    if args.variant:
        overrides["variant"] = args.variant
    if args.threshold is not None:
        overrides["threshold"] = str(args.threshold)
    base = make_config(overrides, spec.base_config) if overrides else spec.base_config
    seeds = parse_seeds(args.seeds) if args.seeds else spec.seeds
    return BatchSpec(base, spec.sweeps, seeds, Path(args.out), spec.pool)


def cmd_run(args) -> int:
    spec = _load(args)
    pool = build_pool(spec.pool)
    for seed in spec.seeds:
        cfg = replace(spec.base_config, seed=seed)
        records = run_experiment(cfg, pool)
        atomic_write(spec.output_dir / f"records_seed_{seed}.csv", records_text(records))
        s = summarize_run(records, cfg.threshold)
        print(f"seed {seed}: best {fmt(s.best_accuracy)} at round {s.best_round}, "
              f"threshold {cfg.threshold} reached at {fmt(s.rounds_to_threshold)}, "
              f"{s.total_params_exchanged} params exchanged")
    return 0


def cmd_batch(args) -> int:
    spec = _load(args)
    for kv in args.sweep or []:
        name, values = kv.split("=", 1)
        spec.sweeps[name] = [v.strip() for v in values.split(",") if v.strip()]
    spec = BatchSpec(spec.base_config, spec.sweeps, spec.seeds, spec.output_dir, spec.pool)
    summary = run_batch(spec, jobs=args.jobs)
    print((spec.output_dir / "table.csv").read_text(), end="")
    print(f"{len(summary['configs'])} configs x {len(spec.seeds)} seeds written to {spec.output_dir}")
    return 0


def cmd_compare(args) -> int:
    spec = _load(args)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    rows = compare_variants(spec.base_config, spec.seeds, spec.pool, variants, jobs=args.jobs)
    text = comparison_text(rows)
    atomic_write(spec.output_dir / "comparison.csv", text)
    detail = {r.variant: [asdict(s) for s in r.summaries] for r in rows}
    atomic_write(spec.output_dir / "comparison.json",
                 json.dumps(detail, indent=2, sort_keys=True) + "\n")
    print(text, end="")
    return 0


def cmd_partition(args) -> int:
    spec = _load(args)
    cfg = spec.base_config
    pool = build_pool(spec.pool)
    clients = setup(cfg, pool)[2].datasets
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    path = spec.output_dir / "partition.csv"
    tmp = path.with_suffix(".csv.tmp")
    write_partition_table(tmp, clients)
    tmp.replace(path)
    for c in clients:
        counts = ", ".join(f"{k}:{n}" for k, n in sorted(c.class_counts.items()) if n)
        print(f"client {c.client_id:3d}  n_k={c.n_k:5d}  {counts}")
    return 0


def cmd_params(args) -> int:
    if args.arch == "cnn":
        spec = mnist_cnn_spec(args.split or 2)
    elif args.arch == "lstm":
        spec = har_lstm_spec(args.split or 2)
    else:
        hidden = [int(h) for h in args.hidden.split(",")]
        spec = dense_spec(args.input_dim, hidden, args.classes, args.split or 1)
    for name, count in param_count(spec):
        print(f"{name:28s} {count:10d}")
    s_g, s_s = partition_sizes(zeros_params(spec))
    print(f"{'shallow (S_g)':28s} {s_g:10d}")
    print(f"{'deep (S_s)':28s} {s_s:10d}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twafl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="flat key = value experiment file")
        p.add_argument("-o", "--out", default="out", help="output directory")
        p.add_argument("--seeds", help="seed list, e.g. 0,1,2 or 0..9")
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--threshold", type=float, help="target test accuracy")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (repeatable)")
        p.add_argument("-j", "--jobs", type=int, default=1, help="parallel runs")

    p = sub.add_parser("run", help="run one config for each seed")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("batch", help="run a sweep grid x seeds")
    common(p)
    p.add_argument("--sweep", action="append", metavar="FIELD=V1,V2",
                   help="sweep a config field (repeatable)")
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("compare", help="FedAVG / TEFL / AFL / TWAFL comparison table")
    common(p)
    p.add_argument("--variants", help="comma-separated subset of variants")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("partition", help="export the client class histogram table")
    common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("params", help="per-layer parameter counts and S_g / S_s")
    p.add_argument("--arch", choices=("cnn", "lstm", "dense"), default="cnn")
    p.add_argument("--split", type=int, help="shallow/deep boundary in layers")
    p.add_argument("--input-dim", type=int, default=20)
    p.add_argument("--hidden", default="16,64")
    p.add_argument("--classes", type=int, default=10)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdxFormatError, IdxConsistencyError, CheckpointFormatError, CapacityError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
