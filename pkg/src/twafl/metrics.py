"""Communication-cost accounting, convergence metrics and multi-run statistics."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import ClientDataset, DataPool
from .model import ModelSpec, loss
from .params import LayeredParams

ABSENT = "---"

RECORD_COLUMNS = (
    "round", "flag", "participants", "test_accuracy", "global_loss",
    "params_down", "params_up", "cumulative_params",
)


class UndefinedBaselineError(ValueError):
    """The normalising variant never reached the accuracy threshold."""


@dataclass(frozen=True)
class RoundRecord:
    round: int
    flag: bool
    participants: tuple[int, ...]
    test_accuracy: float
    global_loss: float
    params_down: int
    params_up: int
    cumulative_params: int

    def __post_init__(self):
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"test_accuracy out of range: {self.test_accuracy}")
        if min(self.params_down, self.params_up, self.cumulative_params) < 0:
            raise ValueError("parameter counts must be non-negative")

    def row(self) -> list[str]:
        return [
            str(self.round),
            "1" if self.flag else "0",
            " ".join(str(k) for k in self.participants),
            repr(float(self.test_accuracy)),
            repr(float(self.global_loss)),
            str(self.params_down),
            str(self.params_up),
            str(self.cumulative_params),
        ]


@dataclass(frozen=True)
class RunSummary:
    best_accuracy: float
    best_round: int
    rounds_to_threshold: int | None
    total_params_exchanged: int
    params_to_threshold: int | None = None


def round_cost(flag: bool, S_g: int, S_s: int, m: int) -> tuple[int, int]:
    """Parameters moved (down, up) in one round with ``m`` participants."""
    if m < 1 or S_g < 1 or S_s < 0:
        raise ValueError(f"invalid cost inputs S_g={S_g}, S_s={S_s}, m={m}")
    per_client = S_g + S_s if flag else S_g
    return m * per_client, m * per_client


def global_loss(central: LayeredParams, clients: Sequence[ClientDataset], spec: ModelSpec,
                pool: DataPool) -> float:
    """Sample-size weighted mean of each client's local cross-entropy."""
    if not clients:
        raise ValueError("no clients to evaluate")
    n = sum(c.n_k for c in clients)
    total = 0.0
    for c in clients:
        total += c.n_k / n * loss(spec, central, pool.batch(c.sample_indices))
    return total


def rounds_to_accuracy(records: Sequence[RoundRecord], threshold: float) -> int | None:
    for r in records:
        if r.test_accuracy >= threshold:
            return r.round
    return None


def summarize_run(records: Sequence[RoundRecord], threshold: float) -> RunSummary:
    if not records:
        return RunSummary(0.0, 0, None, 0, None)
    best = max(records, key=lambda r: (r.test_accuracy, -r.round))
    hit = rounds_to_accuracy(records, threshold)
    to_hit = None
    if hit is not None:
        to_hit = next(r.cumulative_params for r in records if r.round == hit)
    return RunSummary(
        best_accuracy=best.test_accuracy,
        best_round=best.round,
        rounds_to_threshold=hit,
        total_params_exchanged=records[-1].cumulative_params,
        params_to_threshold=to_hit,
    )


@dataclass(frozen=True)
class FieldStats:
    avg: float | None
    stdev: float | None
    count: int
    excluded: int


def summarize_runs(summaries: Sequence[RunSummary]) -> dict[str, FieldStats]:
    """Mean and sample standard deviation of every numeric summary field.

    Runs where a field is absent (threshold never reached) are left out of
    that field and counted in ``excluded``. The deviation of a single value
    is reported as 0.
    """
    if not summaries:
        raise ValueError("summarize_runs needs at least one run")
    out = {}
    for f in fields(RunSummary):
        values = [getattr(s, f.name) for s in summaries]
        present = [float(v) for v in values if v is not None]
        excluded = len(values) - len(present)
        if not present:
            out[f.name] = FieldStats(None, None, 0, excluded)
            continue
        sd = statistics.stdev(present) if len(present) > 1 else 0.0
        out[f.name] = FieldStats(statistics.fmean(present), sd, len(present), excluded)
    return out


def _mean_to_threshold(runs: RunSummary | Sequence[RunSummary]) -> float | None:
    if isinstance(runs, RunSummary):
        runs = [runs]
    hits = [r.params_to_threshold for r in runs if r.params_to_threshold is not None]
    return statistics.fmean(hits) if hits else None


def relative_cost(per_variant: Mapping[str, RunSummary | Sequence[RunSummary]],
                  baseline: str = "TWAFL") -> dict[str, float | None]:
    """Parameters exchanged up to the threshold, relative to ``baseline``.

    Multiple runs per variant are averaged over the runs that reached the
    threshold. Variants that never reach it map to ``None``.
    """
    if baseline not in per_variant:
        raise KeyError(f"baseline variant {baseline!r} missing")
    base = _mean_to_threshold(per_variant[baseline])
    if base is None or base <= 0:
        raise UndefinedBaselineError(f"{baseline} never reached the threshold")
    out = {}
    for name, runs in per_variant.items():
        cost = _mean_to_threshold(runs)
        out[name] = None if cost is None else cost / base
    return out


def cumulative_costs(records: Sequence[RoundRecord]) -> np.ndarray:
    return np.cumsum([r.params_down + r.params_up for r in records], dtype=np.int64)


def write_records(target, records: Sequence[RoundRecord]) -> None:
    """Write records as CSV to a path or an open text stream."""
    if not hasattr(target, "write"):
        with open(target, "w", newline="") as f:
            return write_records(f, records)
    w = csv.writer(target, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow(r.row())


def read_records(path: str | Path) -> list[RoundRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(RoundRecord(
                round=int(row["round"]),
                flag=row["flag"] == "1",
                participants=tuple(int(k) for k in row["participants"].split()),
                test_accuracy=float(row["test_accuracy"]),
                global_loss=float(row["global_loss"]),
                params_down=int(row["params_down"]),
                params_up=int(row["params_up"]),
                cumulative_params=int(row["cumulative_params"]),
            ))
    return out


def fmt(value: float | None, digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ABSENT
    if isinstance(value, int):
        return str(value)
    return f"{value:.{digits}f}"
