"""Sample pools, the non-IID/unbalanced client partitioner, and IDX I/O."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .model import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxConsistencyError(ValueError):
    pass


class CapacityError(ValueError):
    """A class holds fewer samples than a client asked for."""

    def __init__(self, label: int, requested: int, available: int):
        super().__init__(
            f"class {label}: requested {requested} samples but only {available} available"
        )
        self.label = label


@dataclass(frozen=True, eq=False)
class DataPool:
    features: np.ndarray
    labels: np.ndarray
    per_class_index: dict[int, np.ndarray] = field(default=None)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise IdxConsistencyError(f"{x.shape[0]} samples but {y.shape[0]} labels")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        index = {int(c): np.flatnonzero(y == c) for c in np.unique(y)}
        object.__setattr__(self, "per_class_index", index)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class_index)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "DataPool":
        indices = np.asarray(indices, dtype=np.int64)
        return DataPool(self.features[indices], self.labels[indices])

    def batch(self, indices: Sequence[int] | None = None) -> Batch:
        if indices is None:
            return Batch(self.features, self.labels)
        indices = np.asarray(indices, dtype=np.int64)
        return Batch(self.features[indices], self.labels[indices])

    def split(self, test_fraction: float, rng: np.random.Generator) -> tuple["DataPool", "DataPool"]:
        """Random (train, test) split; the test share is rounded to a whole sample."""
        if not 0 <= test_fraction < 1:
            raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
        order = rng.permutation(len(self))
        n_test = int(np.floor(test_fraction * len(self) + 0.5))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


@dataclass(frozen=True)
class PartitionSpec:
    labels: tuple[int, ...]
    n_c: int
    s_min: int
    s_max: int

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(c) for c in self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("partition labels must be distinct")
        if not 1 <= self.n_c <= len(self.labels):
            raise ValueError(
                f"n_c must be between 1 and {len(self.labels)} (number of labels), got {self.n_c}"
            )
        if not 1 <= self.s_min <= self.s_max:
            raise ValueError(f"need 1 <= s_min <= s_max, got {self.s_min}, {self.s_max}")


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    class_counts: dict[int, int]
    sample_indices: np.ndarray
    drawn_num: int | None = None

    @property
    def n_k(self) -> int:
        return int(self.sample_indices.shape[0])

    @property
    def active_classes(self) -> list[int]:
        return sorted(c for c, n in self.class_counts.items() if n > 0)


@dataclass(frozen=True)
class ClassCounts:
    """Per-class sample counts for one client, plus the total size that was drawn."""

    counts: dict[int, int]
    num: int

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def generate_class_counts(spec: PartitionSpec, rng: np.random.Generator) -> ClassCounts:
    """Draw the label-skewed, size-skewed class histogram for one client."""
    chosen = rng.choice(len(spec.labels), size=spec.n_c, replace=False)
    weights = np.zeros(len(spec.labels))
    for i in chosen:
        # uniform on (0, 1]; a zero weight would leave a chosen class empty
        weights[i] = 1.0 - rng.random()
    total = weights.sum()
    num = int(rng.integers(spec.s_min, spec.s_max + 1))
    counts = {c: 0 for c in spec.labels}
    for i in chosen:
        counts[spec.labels[i]] = _round_half_up(weights[i] / total * num)
    return ClassCounts(counts, num)


def materialize(pool: DataPool, counts: Mapping[int, int], rng: np.random.Generator,
                replacement: bool = False, client_id: int = 0) -> ClientDataset:
    """Sample the requested number of pool indices from each class."""
    if isinstance(counts, ClassCounts):
        drawn, counts = counts.num, counts.counts
    else:
        drawn = None
    picked = []
    for label in sorted(counts):
        want = int(counts[label])
        if want < 0:
            raise ValueError(f"class {label}: negative count {want}")
        if want == 0:
            continue
        members = pool.per_class_index.get(label, np.zeros(0, dtype=np.int64))
        if not replacement and want > members.size:
            raise CapacityError(label, want, members.size)
        if members.size == 0:
            raise CapacityError(label, want, 0)
        picked.append(rng.choice(members, size=want, replace=replacement))
    indices = np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)
    indices = indices.astype(np.int64)
    indices.setflags(write=False)
    return ClientDataset(client_id, {int(c): int(n) for c, n in counts.items()}, indices, drawn)


def generate_all_clients(pool: DataPool, labels: Sequence[int], n_c_choices: Sequence[int],
                         s_min: int, s_max: int, K: int, rng: np.random.Generator,
                         replacement: bool = False) -> list[ClientDataset]:
    """Independent per-client draws; clients may share pool samples."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not n_c_choices:
        raise ValueError("n_c_choices is empty")
    clients = []
    for k in range(K):
        n_c = int(rng.choice(np.asarray(n_c_choices)))
        spec = PartitionSpec(tuple(labels), n_c, s_min, s_max)
        counts = generate_class_counts(spec, rng)
        clients.append(materialize(pool, counts, rng, replacement, client_id=k))
    return clients


def synthetic_pool(num_classes: int, input_dim: int, per_class: int, cluster_spread: float,
                   rng: np.random.Generator, center_scale: float = 1.0) -> DataPool:
    """Balanced Gaussian blobs, one per class, centres drawn from N(0, center_scale^2)."""
    if min(num_classes, input_dim, per_class) < 1:
        raise ValueError("num_classes, input_dim and per_class must all be >= 1")
    if cluster_spread < 0:
        raise ValueError("cluster_spread must be non-negative")
    centers = rng.normal(0.0, center_scale, size=(num_classes, input_dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(0.0, 1.0, size=(labels.size, input_dim))
    features = centers[labels] + cluster_spread * noise
    return DataPool(features, labels)


# IDX files: big-endian u32 magic (0x08 = unsigned byte, low byte = ndim),
# one big-endian u32 per dimension, then row-major payload.

def read_idx(path: str | Path) -> np.ndarray:
    """Raw unsigned-byte IDX array with its stored shape."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if ndim == 0 or len(data) < head:
        raise IdxFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    size = int(np.prod(dims))
    if len(data) != head + size:
        raise IdxFormatError(
            f"{path}: expected {size} payload bytes, found {len(data) - head}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=head).reshape(dims).copy()


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX arrays are supported")
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def _magic(path: Path) -> int:
    with open(path, "rb") as f:
        head = f.read(4)
    if len(head) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    return struct.unpack(">I", head)[0]


def load_idx(images_path: str | Path, labels_path: str | Path) -> DataPool:
    """MNIST-style image/label pair, pixels scaled to [0, 1] and flattened."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    if (m := _magic(images_path)) != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: image magic 0x{m:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if (m := _magic(labels_path)) != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: label magic 0x{m:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return DataPool(features, labels.astype(np.int64))


def write_partition_table(path: str | Path, clients: Sequence[ClientDataset]) -> None:
    """One row per (client, class) with the requested count, for 3-D bar inspection."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["client_id", "class", "count"])
        for c in clients:
            for label in sorted(c.class_counts):
                w.writerow([c.client_id, label, c.class_counts[label]])


def read_partition_table(path: str | Path) -> dict[int, dict[int, int]]:
    table: dict[int, dict[int, int]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            table.setdefault(int(row["client_id"]), {})[int(row["class"])] = int(row["count"])
    return table
