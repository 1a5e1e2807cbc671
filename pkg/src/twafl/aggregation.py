"""Server-side combination of client models: size-weighted and temporally weighted."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .params import LayeredParams, Selector, check_compatible, linear_combine


@dataclass(frozen=True, eq=False)
class ClientUploadView:
    """The server's latest copy of one client's model and when each part arrived."""

    client_id: int
    params: LayeredParams
    timestamp_g: int
    timestamp_s: int
    n_k: int

    def __post_init__(self):
        if self.n_k < 1:
            raise ValueError(f"client {self.client_id}: n_k must be >= 1, got {self.n_k}")
        if self.timestamp_s > self.timestamp_g:
            raise ValueError(
                f"client {self.client_id}: deep timestamp {self.timestamp_s} is newer than "
                f"shallow timestamp {self.timestamp_g}"
            )


def _check(views: Sequence[ClientUploadView]) -> None:
    if not views:
        raise ValueError("aggregation needs at least one client view")
    check_compatible(v.params for v in views)


def fedavg_aggregate(views: Sequence[ClientUploadView],
                     selector: Selector = "all") -> LayeredParams:
    _check(views)
    n = sum(v.n_k for v in views)
    return linear_combine([(v.n_k / n, v.params) for v in views], selector)


def temporal_weight(a: float, t: int, timestamp: int) -> float:
    """``a ** -(t - timestamp)``."""
    if a <= 0:
        raise ValueError(f"time-decay base must be positive, got {a}")
    if timestamp > t:
        raise ValueError(f"timestamp {timestamp} lies after the current round {t}")
    return float(a) ** -(t - timestamp)


def temporal_weights(views: Sequence[ClientUploadView], selector: Selector, t: int,
                     a: float, normalize: bool = True) -> list[float]:
    if selector not in ("shallow", "deep"):
        raise ValueError("temporal weights are defined per partition (shallow or deep)")
    n = sum(v.n_k for v in views)
    raw = [
        v.n_k / n * temporal_weight(a, t, v.timestamp_g if selector == "shallow" else v.timestamp_s)
        for v in views
    ]
    if not normalize:
        return raw
    total = sum(raw)
    return [w / total for w in raw]


def temporally_weighted_aggregate(views: Sequence[ClientUploadView], selector: Selector,
                                  t: int, a: float, normalize: bool = True) -> LayeredParams:
    """Size-and-recency weighted sum of the selected partition.

    Shallow blocks use each view's shallow timestamp and deep blocks its deep
    timestamp; ``selector="all"`` aggregates both partitions that way. With
    ``normalize=False`` the raw weights are applied as-is and need not sum to 1.
    """
    _check(views)
    if selector == "all":
        shallow = temporally_weighted_aggregate(views, "shallow", t, a, normalize)
        deep = temporally_weighted_aggregate(views, "deep", t, a, normalize)
        return shallow.replace("deep", deep)
    weights = temporal_weights(views, selector, t, a, normalize)
    return linear_combine([(w, v.params) for w, v in zip(weights, views)], selector)
