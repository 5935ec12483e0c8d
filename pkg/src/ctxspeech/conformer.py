"""Conformer blocks and memory-augmented block stacks.

A block is three pre-norm residual sub-modules applied in order:

* convolution module: pointwise conv (D -> 2D), GLU, depthwise conv,
  pointwise conv (D -> D)
* multi-head self-attention
* convolutional feed-forward: conv (D -> 4D, k=3), ReLU, conv (4D -> D, k=3)

In a stack, block ``n`` sees ``[cached states ∘ current states]`` and only
the current-segment suffix of its output goes up to block ``n + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .attention import AttentionConfig, AttentionWeights, Variant, multi_head_attention
from .memory import SegmentMemory, update
from .tensor import ConfigurationError, DimensionError, Tensor, stop_gradient


@dataclass(frozen=True, eq=False)
class StackConfig:
    num_blocks: int = 4
    hidden: int = 384
    num_heads: int = 4
    dw_kernel: int = 5
    ffn_kernel: int = 3
    ffn_expansion: int = 4
    variant: Variant = Variant.LINEARIZED_RPE
    seed: int = 0
    shared_permutation: bool = False
    attention: AttentionConfig = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigurationError(f"a stack needs at least one block, got {self.num_blocks}")
        if self.hidden % self.num_heads:
            raise ConfigurationError(f"hidden {self.hidden} is not divisible by {self.num_heads} heads")
        attn = AttentionConfig(self.num_heads, self.hidden // self.num_heads, Variant(self.variant),
                               seed=self.seed, shared_permutation=self.shared_permutation)
        object.__setattr__(self, "attention", attn)


# Insertion order fixes the RNG stream used by ``init``.
def _param_shapes(D: int, dw_kernel: int, ffn_kernel: int, expansion: int) -> dict[str, tuple[int, ...]]:
    H = D * expansion
    return {
        "convm.ln_gain": (D,), "convm.ln_bias": (D,),
        "convm.ff1_w": (1, D, 2 * D), "convm.ff1_b": (2 * D,),
        "convm.dw_w": (dw_kernel, D), "convm.dw_b": (D,),
        "convm.ff2_w": (1, D, D), "convm.ff2_b": (D,),
        "mhsa.ln_gain": (D,), "mhsa.ln_bias": (D,),
        "mhsa.w_q": (D, D), "mhsa.w_k": (D, D), "mhsa.w_v": (D, D), "mhsa.w_o": (D, D),
        "convffn.ln_gain": (D,), "convffn.ln_bias": (D,),
        "convffn.w1": (ffn_kernel, D, H), "convffn.b1": (H,),
        "convffn.w2": (ffn_kernel, H, D), "convffn.b2": (D,),
    }


@dataclass(frozen=True, eq=False)
class ConformerBlockWeights:
    params: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def hidden(self) -> int:
        return self.params["convm.ln_gain"].shape[0]

    @property
    def attention(self) -> AttentionWeights:
        p = self.params
        return AttentionWeights(p["mhsa.w_q"], p["mhsa.w_k"], p["mhsa.w_v"], p["mhsa.w_o"])

    @classmethod
    def init(cls, config: StackConfig, rng: np.random.Generator, scale: float = 0.05) -> "ConformerBlockWeights":
        """Uniform(-scale, scale) weights; layer-norm gains start at 1, biases at 0."""
        params = {}
        for name, shape in _param_shapes(config.hidden, config.dw_kernel, config.ffn_kernel,
                                          config.ffn_expansion).items():
            if name.endswith("ln_gain"):
                params[name] = Tensor(np.ones(shape))
            elif name.endswith("ln_bias"):
                params[name] = Tensor(np.zeros(shape))
            else:
                params[name] = Tensor(rng.uniform(-scale, scale, size=shape))
        return cls(params)

    @classmethod
    def zeros(cls, config: StackConfig) -> "ConformerBlockWeights":
        shapes = _param_shapes(config.hidden, config.dw_kernel, config.ffn_kernel, config.ffn_expansion)
        return cls({name: Tensor(np.zeros(shape)) for name, shape in shapes.items()})

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "ConformerBlockWeights":
        return ConformerBlockWeights({k: fn(k, v) for k, v in self.params.items()})


def conv_module(x: Tensor, w: ConformerBlockWeights) -> Tensor:
    if x.ndim != 2 or x.shape[1] != w.hidden:
        raise DimensionError(f"conv_module: input {x.shape} for hidden {w.hidden}")
    h = ops.layer_norm(x, w["convm.ln_gain"], w["convm.ln_bias"])
    h = ops.conv1d(h, w["convm.ff1_w"], w["convm.ff1_b"])
    h = ops.glu(h, axis=-1)
    h = ops.depthwise_conv1d(h, w["convm.dw_w"], w["convm.dw_b"])
    h = ops.conv1d(h, w["convm.ff2_w"], w["convm.ff2_b"])
    return ops.add(x, h)


def attention_module(x: Tensor, w: ConformerBlockWeights, attention: AttentionConfig,
                     positions: np.ndarray | None = None) -> Tensor:
    h = ops.layer_norm(x, w["mhsa.ln_gain"], w["mhsa.ln_bias"])
    h = multi_head_attention(h, h, w.attention, attention, positions, positions)
    return ops.add(x, h)


def conv_ffn(x: Tensor, w: ConformerBlockWeights) -> Tensor:
    h = ops.layer_norm(x, w["convffn.ln_gain"], w["convffn.ln_bias"])
    h = ops.relu(ops.conv1d(h, w["convffn.w1"], w["convffn.b1"]))
    h = ops.conv1d(h, w["convffn.w2"], w["convffn.b2"])
    return ops.add(x, h)


def conformer_block(x: Tensor, w: ConformerBlockWeights, config: StackConfig,
                    positions: np.ndarray | None = None) -> Tensor:
    """ConvM -> MHSA -> ConvFFN; output length equals input length."""
    h = conv_module(x, w)
    h = attention_module(h, w, config.attention, positions)
    return conv_ffn(h, w)


def stack_forward(x: Tensor, blocks: list[ConformerBlockWeights], config: StackConfig,
                  memory: SegmentMemory | None = None,
                  trace: list[tuple[int, int]] | None = None) -> tuple[Tensor, SegmentMemory | None]:
    """Run ``blocks`` over the current segment ``x`` with optional cached prefixes.

    Returns the current-segment output and the memory updated with this
    segment's block inputs (``None`` if no memory was given).  When ``trace``
    is a list, ``(concatenated length, carried length)`` is appended per block.
    """
    if len(blocks) != config.num_blocks:
        raise ConfigurationError(f"{len(blocks)} weight sets for {config.num_blocks} blocks")
    if memory is not None:
        if memory.num_layers != len(blocks):
            raise ConfigurationError(f"memory has {memory.num_layers} layers, stack has {len(blocks)}")
        if memory.width != config.hidden:
            raise ConfigurationError(f"memory width {memory.width} != hidden {config.hidden}")
    L = x.shape[0]
    h = x
    block_inputs = []
    for n, w in enumerate(blocks):
        block_inputs.append(h)
        cache = memory.caches[n] if memory is not None else None
        M = 0 if cache is None else cache.shape[0]
        seq = ops.concat([stop_gradient(cache), h], axis=0) if M else h
        out = conformer_block(seq, w, config, np.arange(M + L))
        h = out[M:] if M else out
        if trace is not None:
            trace.append((seq.shape[0], h.shape[0]))
    new_memory = update(memory, block_inputs) if memory is not None else None
    return h, new_memory


def init_stack(config: StackConfig, rng: np.random.Generator) -> list[ConformerBlockWeights]:
    return [ConformerBlockWeights.init(config, rng) for _ in range(config.num_blocks)]


def stack_named(blocks: list[ConformerBlockWeights], prefix: str) -> dict[str, Tensor]:
    """Checkpoint names ``{prefix}.block{n}.{convm|mhsa|convffn}.{param}``."""
    return {f"{prefix}.block{n}.{name}": t for n, b in enumerate(blocks) for name, t in b.params.items()}


def stack_from_named(tensors: dict[str, Tensor], prefix: str, config: StackConfig) -> list[ConformerBlockWeights]:
    shapes = _param_shapes(config.hidden, config.dw_kernel, config.ffn_kernel, config.ffn_expansion)
    blocks = []
    for n in range(config.num_blocks):
        params = {}
        for name, shape in shapes.items():
            key = f"{prefix}.block{n}.{name}"
            if key not in tensors:
                raise ConfigurationError(f"checkpoint is missing {key}")
            if tensors[key].shape != shape:
                raise ConfigurationError(f"{key}: shape {tensors[key].shape}, expected {shape}")
            params[name] = tensors[key]
        blocks.append(ConformerBlockWeights(params))
    return blocks
