"""Layered parameter containers split into shallow and deep partitions.

Binary checkpoint layout (all integers little-endian ``uint32``)::

    magic        4 bytes   b"LPAR"
    version      u32       1
    block_count  u32
    split_index  u32
    per block:   layer_id u32, ndim u32, dims u32 * ndim
    payload      float64 little-endian, blocks in order, each block row-major

The payload length is implied by the shapes; trailing bytes are rejected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

Selector = Literal["shallow", "deep", "all"]
SELECTORS = ("shallow", "deep", "all")

_MAGIC = b"LPAR"
_VERSION = 1


class StructureError(ValueError):
    """Parameter containers with incompatible block layouts."""


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ParamBlock:
    layer_id: int
    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if not shape or any(s < 1 for s in shape):
            raise StructureError(f"block shape entries must be >= 1, got {shape}")
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size != int(np.prod(shape)):
            raise StructureError(
                f"block of shape {shape} needs {int(np.prod(shape))} values, got {values.size}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.size

    def array(self) -> np.ndarray:
        """Read-only view of the values in ``shape``."""
        return self.values.reshape(self.shape)


@dataclass(frozen=True, eq=False)
class LayeredParams:
    """Ordered blocks; ``blocks[:split_index]`` are shallow, the rest deep."""

    blocks: tuple[ParamBlock, ...]
    split_index: int

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if not 0 < self.split_index < len(blocks):
            raise StructureError(
                f"split_index must satisfy 0 < split_index < {len(blocks)}, got {self.split_index}"
            )
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], split_index: int,
                    layer_ids: Sequence[int] | None = None) -> "LayeredParams":
        if layer_ids is None:
            layer_ids = range(len(arrays))
        blocks = tuple(
            ParamBlock(lid, np.shape(a), np.asarray(a)) for lid, a in zip(layer_ids, arrays)
        )
        return cls(blocks, split_index)

    @property
    def shallow(self) -> tuple[ParamBlock, ...]:
        return self.blocks[: self.split_index]

    @property
    def deep(self) -> tuple[ParamBlock, ...]:
        return self.blocks[self.split_index:]

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    def block_range(self, selector: Selector) -> range:
        if selector == "shallow":
            return range(0, self.split_index)
        if selector == "deep":
            return range(self.split_index, len(self.blocks))
        if selector == "all":
            return range(0, len(self.blocks))
        raise ValueError(f"unknown selector {selector!r}; expected one of {SELECTORS}")

    def layout(self) -> tuple[tuple[int, tuple[int, ...]], ...]:
        return tuple((b.layer_id, b.shape) for b in self.blocks)

    def vector(self, selector: Selector = "all") -> np.ndarray:
        idx = self.block_range(selector)
        if not idx:
            return np.zeros(0)
        return np.concatenate([self.blocks[i].values for i in idx])

    def arrays(self) -> list[np.ndarray]:
        return [b.array() for b in self.blocks]

    def replace(self, selector: Selector, source: "LayeredParams") -> "LayeredParams":
        """Copy of ``self`` with the selected partition taken from ``source``."""
        check_compatible([self, source])
        chosen = set(self.block_range(selector))
        blocks = tuple(
            source.blocks[i] if i in chosen else b for i, b in enumerate(self.blocks)
        )
        return LayeredParams(blocks, self.split_index)

    def with_split(self, split_index: int) -> "LayeredParams":
        return LayeredParams(self.blocks, split_index)

    def equals(self, other: "LayeredParams", selector: Selector = "all") -> bool:
        """Bit-exact comparison of the selected partition."""
        if self.layout() != other.layout() or self.split_index != other.split_index:
            return False
        return all(
            np.array_equal(self.blocks[i].values, other.blocks[i].values)
            for i in self.block_range(selector)
        )

    def max_abs_diff(self, other: "LayeredParams", selector: Selector = "all") -> float:
        check_compatible([self, other])
        return float(np.max(np.abs(self.vector(selector) - other.vector(selector)), initial=0.0))


def check_compatible(params: Iterable[LayeredParams]) -> None:
    params = list(params)
    if not params:
        return
    ref = params[0]
    for p in params[1:]:
        if p.split_index != ref.split_index:
            raise StructureError(
                f"split_index mismatch: {p.split_index} vs {ref.split_index}"
            )
        if p.layout() != ref.layout():
            raise StructureError("block shapes differ between parameter containers")


def partition_sizes(p: LayeredParams) -> tuple[int, int]:
    """Element counts ``(S_g, S_s)`` of the shallow and deep partitions."""
    return sum(b.size for b in p.shallow), sum(b.size for b in p.deep)


def linear_combine(terms: Sequence[tuple[float, LayeredParams]],
                   selector: Selector = "all") -> LayeredParams:
    """Element-wise weighted sum over one partition.

    Terms are accumulated in the order given. Blocks outside the selected
    partition are copied from the first term's params.
    """
    if not terms:
        raise ValueError("linear_combine needs at least one term")
    check_compatible(p for _, p in terms)
    first = terms[0][1]
    chosen = first.block_range(selector)
    blocks = list(first.blocks)
    for i in chosen:
        acc = np.zeros(first.blocks[i].size)
        for coef, p in terms:
            acc += float(coef) * p.blocks[i].values
        ref = first.blocks[i]
        blocks[i] = ParamBlock(ref.layer_id, ref.shape, acc)
    return LayeredParams(tuple(blocks), first.split_index)


def zeros_like(p: LayeredParams) -> LayeredParams:
    return LayeredParams(
        tuple(ParamBlock(b.layer_id, b.shape, np.zeros(b.size)) for b in p.blocks),
        p.split_index,
    )


def to_bytes(p: LayeredParams) -> bytes:
    header = [_MAGIC, struct.pack("<III", _VERSION, len(p.blocks), p.split_index)]
    for b in p.blocks:
        header.append(struct.pack(f"<II{len(b.shape)}I", b.layer_id, len(b.shape), *b.shape))
    payload = [b.values.astype("<f8", copy=False).tobytes() for b in p.blocks]
    return b"".join(header + payload)


def from_bytes(data: bytes) -> LayeredParams:
    view = memoryview(data)
    if bytes(view[:4]) != _MAGIC:
        raise CheckpointFormatError("not a parameter checkpoint (bad magic)")
    try:
        version, count, split = struct.unpack_from("<III", view, 4)
        if version != _VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        offset = 16
        heads = []
        for _ in range(count):
            layer_id, ndim = struct.unpack_from("<II", view, offset)
            offset += 8
            shape = struct.unpack_from(f"<{ndim}I", view, offset)
            offset += 4 * ndim
            heads.append((layer_id, shape))
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint header: {exc}") from None
    blocks = []
    for layer_id, shape in heads:
        n = int(np.prod(shape)) if shape else 0
        end = offset + 8 * n
        if end > len(view):
            raise CheckpointFormatError("truncated checkpoint payload")
        values = np.frombuffer(view[offset:end], dtype="<f8").astype(np.float64)
        blocks.append(ParamBlock(layer_id, shape, values))
        offset = end
    if offset != len(view):
        raise CheckpointFormatError(f"{len(view) - offset} trailing bytes after payload")
    try:
        return LayeredParams(tuple(blocks), split)
    except StructureError as exc:
        raise CheckpointFormatError(str(exc)) from None


def save(p: LayeredParams, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(p))


def load(path: str | Path) -> LayeredParams:
    return from_bytes(Path(path).read_bytes())
