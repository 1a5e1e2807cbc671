"""Seed sweeps, parameter grids and the four-variant comparison table."""

from __future__ import annotations

import csv
import io
import itertools
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DataPool, load_idx, synthetic_pool
from .metrics import (
    ABSENT, RunSummary, UndefinedBaselineError, fmt, relative_cost, summarize_run,
    summarize_runs, write_records,
)
from .protocol import (
    VARIANTS, ConfigError, ProtocolConfig, dump_config, freq_label, make_config,
    read_key_values, run_experiment,
)


@dataclass(frozen=True)
class PoolConfig:
    """Where the sample pool comes from: seeded Gaussian blobs or IDX files."""

    dataset: str = "synthetic"
    num_classes: int = 10
    input_dim: int = 20
    per_class: int = 600
    cluster_spread: float = 1.0
    center_scale: float = 1.0
    seed: int = 0
    images: str = ""
    labels: str = ""

    def __post_init__(self):
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigError("pool.dataset", "must be 'synthetic' or 'idx'")
        if self.dataset == "idx" and not (self.images and self.labels):
            raise ConfigError("pool.images", "idx pools need both pool.images and pool.labels")


def build_pool(pc: PoolConfig) -> DataPool:
    # IDX files are re-read every time so edits on disk are never masked by the cache
    if pc.dataset == "idx":
        return load_idx(pc.images, pc.labels)
    return _synthetic(pc)


@lru_cache(maxsize=4)
def _synthetic(pc: PoolConfig) -> DataPool:
    return synthetic_pool(pc.num_classes, pc.input_dim, pc.per_class, pc.cluster_spread,
                          np.random.default_rng(pc.seed), pc.center_scale)


def _pool_config(pairs: dict[str, str]) -> PoolConfig:
    kinds = {f.name: f.type for f in fields(PoolConfig)}
    kwargs = {}
    for key, value in pairs.items():
        kind = kinds.get(key)
        if kind is None:
            raise ConfigError(f"pool.{key}", "unknown pool field")
        try:
            kwargs[key] = {"int": int, "float": float}.get(kind, str)(value)
        except ValueError:
            raise ConfigError(f"pool.{key}", f"cannot parse {value!r}") from None
    return PoolConfig(**kwargs)


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0,1,5"`` or an inclusive range ``"0..9"``."""
    seeds = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError("seeds", "no seeds given")
    return tuple(seeds)


@dataclass
class BatchSpec:
    base_config: ProtocolConfig
    sweeps: dict[str, list[str]] = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)
    output_dir: Path = Path("out")
    pool: PoolConfig = PoolConfig()

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        known = {f.name for f in fields(ProtocolConfig)} | {"freq"}
        for name, values in self.sweeps.items():
            if name not in known:
                raise ConfigError(f"sweep.{name}", "not a config field")
            if not values:
                raise ConfigError(f"sweep.{name}", "empty value list")
        self.output_dir = Path(self.output_dir)

    def grid(self) -> list[tuple[dict[str, str], ProtocolConfig]]:
        names = list(self.sweeps)
        out = []
        for combo in itertools.product(*(self.sweeps[n] for n in names)):
            overrides = dict(zip(names, combo))
            out.append((overrides, make_config(overrides, self.base_config)))
        return out


def read_batch_file(path: str | Path, output_dir: str | Path | None = None) -> BatchSpec:
    """Flat config file: ProtocolConfig keys, ``pool.*``, ``sweep.*`` and ``seeds``."""
    pairs = read_key_values(path)
    proto, pool, sweeps = {}, {}, {}
    seeds = (0,)
    for key, value in pairs.items():
        if key.startswith("pool."):
            pool[key[5:]] = value
        elif key.startswith("sweep."):
            sweeps[key[6:]] = [v.strip() for v in value.split(",") if v.strip()]
        elif key == "seeds":
            seeds = parse_seeds(value)
        else:
            proto[key] = value
    return BatchSpec(make_config(proto), sweeps, seeds, Path(output_dir or "out"), _pool_config(pool))


def run_tag(overrides: dict[str, str]) -> str:
    if not overrides:
        return "base"
    safe = []
    for k, v in overrides.items():
        v = "".join(ch if ch.isalnum() or ch in ".-" else "-" for ch in v.replace(" ", ""))
        safe.append(f"{k}={v}")
    return "_".join(safe)


def atomic_write(path: Path, text: str) -> None:
    """Write via a temp file in the same directory so readers never see partial output."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def records_text(records) -> str:
    buf = io.StringIO()
    write_records(buf, records)
    return buf.getvalue()


def _run_one(args):
    config, pool_config = args
    return run_experiment(config, build_pool(pool_config))


def run_many(configs: Sequence[ProtocolConfig], pool_config: PoolConfig, jobs: int = 1):
    work = [(c, pool_config) for c in configs]
    if jobs <= 1 or len(work) <= 1:
        return [_run_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_run_one, work))


def _stats_dict(summaries: Sequence[RunSummary]) -> dict:
    return {name: asdict(stats) for name, stats in summarize_runs(summaries).items()}


def _avg_sd(stats, digits=4) -> str:
    if stats.avg is None:
        return ABSENT
    return f"{stats.avg:.{digits}f} ({stats.stdev:.{digits}f})"


def run_batch(spec: BatchSpec, jobs: int = 1) -> dict:
    """Run every sweep combination under every seed and write the results.

    Layout under ``output_dir``::

        runs/<tag>/seed_<s>.csv   per-round records
        runs/<tag>/config.txt     the resolved config
        summary.json              per-run summaries and AVG/STDEV per config
        table.csv                 one row per config
    """
    grid = spec.grid()
    configs = [replace(cfg, seed=s) for _, cfg in grid for s in spec.seeds]
    results = run_many(configs, spec.pool, jobs)
    out = spec.output_dir
    summary = {"seeds": list(spec.seeds), "pool": asdict(spec.pool), "configs": []}
    rows = []
    n = len(spec.seeds)
    for i, (overrides, cfg) in enumerate(grid):
        tag = run_tag(overrides)
        runs = results[i * n:(i + 1) * n]
        summaries = [summarize_run(r, cfg.threshold) for r in runs]
        for seed, records in zip(spec.seeds, runs):
            atomic_write(out / "runs" / tag / f"seed_{seed}.csv", records_text(records))
        atomic_write(out / "runs" / tag / "config.txt", dump_config(cfg))
        stats = summarize_runs(summaries)
        summary["configs"].append({
            "tag": tag,
            "overrides": overrides,
            "variant": cfg.variant,
            "freq": freq_label(cfg),
            "a": cfg.a,
            "runs": [dict(seed=s, **asdict(r)) for s, r in zip(spec.seeds, summaries)],
            "stats": _stats_dict(summaries),
        })
        reached = stats["rounds_to_threshold"].count
        rows.append([tag, cfg.variant, freq_label(cfg), fmt(cfg.a), str(cfg.K), str(cfg.m),
                     _avg_sd(stats["best_accuracy"]), _avg_sd(stats["rounds_to_threshold"], 2),
                     f"{reached}/{n}"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "variant", "freq", "a", "K", "m", "best_accuracy", "rounds", "reached"])
    w.writerows(rows)
    atomic_write(out / "table.csv", buf.getvalue())
    atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


@dataclass
class VariantRow:
    variant: str
    rounds: float | None
    best_accuracy: float
    relative_cost: float | None
    reached: int
    runs: int
    summaries: list[RunSummary]


def compare_variants(base: ProtocolConfig, seeds: Sequence[int], pool_config: PoolConfig,
                     variants: Sequence[str] = VARIANTS, jobs: int = 1,
                     baseline: str = "TWAFL") -> list[VariantRow]:
    """Run each variant under the same seeds and tabulate rounds, accuracy and cost."""
    configs = {v: base.with_variant(v) for v in variants}
    flat = [replace(configs[v], seed=s) for v in variants for s in seeds]
    results = run_many(flat, pool_config, jobs)
    n = len(seeds)
    per_variant = {}
    for i, v in enumerate(variants):
        per_variant[v] = [summarize_run(r, base.threshold) for r in results[i * n:(i + 1) * n]]
    try:
        costs = relative_cost(per_variant, baseline)
    except (UndefinedBaselineError, KeyError):
        costs = {v: None for v in variants}
    rows = []
    for v in variants:
        stats = summarize_runs(per_variant[v])
        rows.append(VariantRow(
            variant=v,
            rounds=stats["rounds_to_threshold"].avg,
            best_accuracy=stats["best_accuracy"].avg,
            relative_cost=costs[v],
            reached=stats["rounds_to_threshold"].count,
            runs=n,
            summaries=per_variant[v],
        ))
    return rows


def comparison_text(rows: Sequence[VariantRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "rounds", "best_accuracy", "c_cost", "reached"])
    for r in rows:
        w.writerow([r.variant, fmt(r.rounds, 2), fmt(r.best_accuracy), fmt(r.relative_cost, 2),
                    f"{r.reached}/{r.runs}"])
    return buf.getvalue()
