"""Per-layer segment caches carried from one sentence to the next."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .tensor import ConfigurationError, Tensor

ENCODER_MEM_LEN = 128
DECODER_MEM_LEN = 64


@dataclass(frozen=True)
class MemoryConfig:
    num_layers: int = 4
    width: int = 384
    mem_len_encoder: int = ENCODER_MEM_LEN
    mem_len_decoder: int = DECODER_MEM_LEN

    def capacity(self, stack: str) -> int:
        if stack == "encoder":
            return self.mem_len_encoder
        if stack == "decoder":
            return self.mem_len_decoder
        raise ValueError(f"stack must be 'encoder' or 'decoder', got {stack!r}")


def _frozen_copy(data: np.ndarray) -> Tensor:
    t = Tensor(data)
    t.stop_grad = True
    return t


@dataclass(frozen=True, eq=False)
class SegmentMemory:
    """Immutable cache of block-input states from the previous segment.

    ``caches[n]`` is ``[m_n, width]`` with ``m_n <= capacity``; every cache is
    a detached copy flagged as a gradient barrier.
    """

    caches: tuple[Tensor, ...]
    capacity: int
    width: int
    segment_index: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.caches)

    @property
    def lengths(self) -> list[int]:
        return [c.shape[0] for c in self.caches]

    def is_empty(self) -> bool:
        return all(n == 0 for n in self.lengths)

    def same_as(self, other: "SegmentMemory") -> bool:
        return (self.capacity == other.capacity and self.width == other.width
                and self.segment_index == other.segment_index
                and len(self.caches) == len(other.caches)
                and all(np.array_equal(a.data, b.data) for a, b in zip(self.caches, other.caches)))

    def named(self, prefix: str = "mem") -> dict[str, Tensor]:
        return {f"{prefix}.layer{n}": c for n, c in enumerate(self.caches)}


def new_memory(config: MemoryConfig = MemoryConfig(), stack: str = "encoder") -> SegmentMemory:
    cap = config.capacity(stack)
    if cap < 0:
        raise ConfigurationError(f"memory length must be >= 0, got {cap}")
    empty = tuple(_frozen_copy(np.zeros((0, config.width))) for _ in range(config.num_layers))
    return SegmentMemory(empty, cap, config.width, 0)


def update(memory: SegmentMemory, layer_states: Sequence[Tensor]) -> SegmentMemory:
    """Replace every cache with the last ``min(capacity, L)`` frames of its layer state."""
    if len(layer_states) != memory.num_layers:
        raise ConfigurationError(f"{len(layer_states)} layer states for {memory.num_layers} cached layers")
    caches = []
    for n, state in enumerate(layer_states):
        data = state.data if isinstance(state, Tensor) else np.asarray(state, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != memory.width:
            raise ConfigurationError(f"layer {n}: state {data.shape} does not match memory width {memory.width}")
        keep = min(memory.capacity, data.shape[0])
        caches.append(_frozen_copy(data[data.shape[0] - keep:]))
    return replace(memory, caches=tuple(caches), segment_index=memory.segment_index + 1)


def reset(memory: SegmentMemory) -> SegmentMemory:
    empty = tuple(_frozen_copy(np.zeros((0, memory.width))) for _ in memory.caches)
    return replace(memory, caches=empty, segment_index=0)
