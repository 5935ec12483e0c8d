"""End-to-end paragraph forward pass with synthetic weights.

Per sentence: phoneme embeddings (+ contextual streams) -> encoder stack
with memory -> length regulation -> decoder stack with memory -> linear mel
projection.  Encoder and decoder memories start empty for every paragraph.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import ops
from .attention import Variant
from .conformer import ConformerBlockWeights, StackConfig, init_stack, stack_forward, stack_named
from .context import (CONTEXT_SIZE, ContextEncoderWeights, ContextualEncoder, CorpusStats,
                      EmbeddingProvider, HashEmbeddingProvider, InputError, ParagraphDocument, fuse)
from .memory import DECODER_MEM_LEN, ENCODER_MEM_LEN, MemoryConfig, SegmentMemory, new_memory
from .tensor import ConfigurationError, Tensor

DEFAULT_FRAMES_PER_PHONEME = 4


class SynthesisError(RuntimeError):
    """A stage failed while synthesizing a given sentence."""

    def __init__(self, sentence: int, cause: BaseException):
        super().__init__(f"sentence {sentence}: {type(cause).__name__}: {cause}")
        self.sentence = sentence


@dataclass(frozen=True)
class ModelConfig:
    n_enc: int = 4
    n_dec: int = 4
    hidden: int = 384
    heads: int = 4
    mem_len_encoder: int = ENCODER_MEM_LEN
    mem_len_decoder: int = DECODER_MEM_LEN
    context_size: int = CONTEXT_SIZE
    mel_bins: int = 80
    variant: Variant = Variant.LINEARIZED_RPE
    phoneme_vocab: int = 256
    seed: int = 0
    provider_seed: int = 0
    use_memory: bool = True
    use_context: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        problems = []
        for name in ("n_enc", "n_dec", "hidden", "heads", "mel_bins", "phoneme_vocab"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.heads >= 1 and self.hidden % self.heads:
            problems.append(f"hidden {self.hidden} is not heads x head_dim for heads {self.heads}")
        if self.mem_len_encoder < 0 or self.mem_len_decoder < 0:
            problems.append("memory lengths must be >= 0")
        if self.context_size < 1 or self.context_size % 2 == 0:
            problems.append(f"context size {self.context_size} must be a positive odd number")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_json(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    encoder_config: StackConfig
    decoder_config: StackConfig
    phoneme_table: Tensor
    encoder: list[ConformerBlockWeights]
    decoder: list[ConformerBlockWeights]
    decoder_input: Tensor
    mel_w: Tensor
    mel_b: Tensor
    context: ContextEncoderWeights

    def checkpoint(self) -> dict[str, Tensor]:
        named = {"emb.phoneme": self.phoneme_table, "dec.input": self.decoder_input,
                 "mel.w": self.mel_w, "mel.b": self.mel_b}
        named.update(stack_named(self.encoder, "enc"))
        named.update(stack_named(self.decoder, "dec"))
        named.update(self.context.named("ctx"))
        return named


def build_model(config: ModelConfig) -> Model:
    """Draw every weight from ``uniform(-0.05, 0.05)`` seeded by ``config.seed``.

    Layer-norm gains are 1 and biases 0.
    """
    rng = np.random.default_rng(config.seed)
    D = config.hidden
    enc_cfg = StackConfig(config.n_enc, D, config.heads, variant=config.variant, seed=config.seed)
    dec_cfg = StackConfig(config.n_dec, D, config.heads, variant=config.variant, seed=config.seed + 7919)
    return Model(
        config=config,
        encoder_config=enc_cfg,
        decoder_config=dec_cfg,
        phoneme_table=Tensor(rng.uniform(-0.05, 0.05, (config.phoneme_vocab, D))),
        encoder=init_stack(enc_cfg, rng),
        decoder=init_stack(dec_cfg, rng),
        decoder_input=Tensor(rng.uniform(-0.05, 0.05, (D,))),
        mel_w=Tensor(rng.uniform(-0.05, 0.05, (D, config.mel_bins))),
        mel_b=Tensor(rng.uniform(-0.05, 0.05, (config.mel_bins,))),
        context=ContextEncoderWeights.init(rng, dim=D),
    )


def length_regulate(x: Tensor, durations: Sequence[int]) -> Tensor:
    """Repeat row ``p`` of ``x`` ``durations[p]`` times."""
    durations = list(durations)
    if len(durations) != x.shape[0]:
        raise InputError(f"{len(durations)} durations for {x.shape[0]} phonemes")
    for p, d in enumerate(durations):
        if int(d) != d or d < 1:
            raise InputError(f"duration {d!r} at phoneme {p} is not a positive integer")
    return ops.repeat_rows(x, [int(d) for d in durations])


def phoneme_ids(doc: ParagraphDocument, sentence: int, vocab: int) -> np.ndarray:
    """Stub phoneme inventory: hash of (token text, phoneme slot) into ``vocab`` ids."""
    ids = []
    for tok in doc.sentences[sentence].tokens:
        for j in range(tok.phoneme_count):
            h = hashlib.sha1(f"{tok.text}\x00{j}".encode("utf-8")).digest()
            ids.append(int.from_bytes(h[:8], "little") % vocab)
    return np.asarray(ids, dtype=np.intp)


@dataclass
class SynthesisResult:
    mel: Tensor
    boundaries: list[tuple[int, int]]
    encoder_memory: SegmentMemory | None
    decoder_memory: SegmentMemory | None
    timings: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "mel_shape": list(self.mel.shape),
            "boundaries": [list(b) for b in self.boundaries],
            "encoder_memory_lengths": self.encoder_memory.lengths if self.encoder_memory else None,
            "decoder_memory_lengths": self.decoder_memory.lengths if self.decoder_memory else None,
            "timings_ms": {k: v * 1e3 for k, v in self.timings.items()},
        }


def _memory_config(model: Model, stack: str) -> MemoryConfig:
    c = model.config
    n = c.n_enc if stack == "encoder" else c.n_dec
    return MemoryConfig(n, c.hidden, c.mem_len_encoder, c.mem_len_decoder)


def fresh_memories(model: Model) -> tuple[SegmentMemory | None, SegmentMemory | None]:
    if not model.config.use_memory:
        return None, None
    return (new_memory(_memory_config(model, "encoder"), "encoder"),
            new_memory(_memory_config(model, "decoder"), "decoder"))


def synthesize_sentence(model: Model, doc: ParagraphDocument, sentence: int, durations: Sequence[int],
                        provider: EmbeddingProvider, enc_memory: SegmentMemory | None = None,
                        dec_memory: SegmentMemory | None = None, stats: CorpusStats | None = None,
                        timings: dict[str, float] | None = None):
    """One sentence through the model; returns ``(mel, enc_memory, dec_memory)``."""
    cfg = model.config
    timings = {} if timings is None else timings

    def tick(stage: str, t0: float) -> float:
        now = time.perf_counter()
        timings[stage] = timings.get(stage, 0.0) + now - t0
        return now

    t = time.perf_counter()
    ids = phoneme_ids(doc, sentence, cfg.phoneme_vocab)
    x = Tensor(model.phoneme_table.data[ids])
    if cfg.use_context:
        encoder = ContextualEncoder(model.context, provider, stats, cfg.context_size)
        tok, sent = encoder.encode(doc, sentence)
        x = fuse(x, tok, sent)
    t = tick("context", t)
    enc_out, enc_memory = stack_forward(x, model.encoder, model.encoder_config, enc_memory)
    t = tick("encoder", t)
    frames = ops.add(length_regulate(enc_out, durations), model.decoder_input)
    t = tick("length_regulate", t)
    dec_out, dec_memory = stack_forward(frames, model.decoder, model.decoder_config, dec_memory)
    t = tick("decoder", t)
    mel = ops.add(ops.matmul(dec_out, model.mel_w), model.mel_b)
    tick("mel", t)
    return mel, enc_memory, dec_memory


def synthesize_paragraph(model: Model, doc: ParagraphDocument,
                         durations: Sequence[Sequence[int]] | None = None,
                         provider: EmbeddingProvider | None = None,
                         stats: CorpusStats | None = None) -> SynthesisResult:
    """Synthesize sentences in order, carrying memories within the paragraph.

    ``durations[s]`` gives frames per phoneme of sentence ``s``; missing
    durations default to 4 frames per phoneme.
    """
    provider = provider or HashEmbeddingProvider(model.config.provider_seed)
    if durations is None:
        durations = [[DEFAULT_FRAMES_PER_PHONEME] * s.num_phonemes for s in doc.sentences]
    if len(durations) != len(doc.sentences):
        raise InputError(f"{len(durations)} duration lists for {len(doc.sentences)} sentences")
    enc_mem, dec_mem = fresh_memories(model)
    timings: dict[str, float] = {}
    mels, boundaries, start = [], [], 0
    for s in range(len(doc.sentences)):
        try:
            mel, enc_mem, dec_mem = synthesize_sentence(model, doc, s, durations[s], provider,
                                                        enc_mem, dec_mem, stats, timings)
        except Exception as exc:
            raise SynthesisError(s, exc) from exc
        mels.append(mel.data)
        boundaries.append((start, start + mel.shape[0]))
        start += mel.shape[0]
    return SynthesisResult(Tensor(np.concatenate(mels, axis=0)), boundaries, enc_mem, dec_mem, timings)
