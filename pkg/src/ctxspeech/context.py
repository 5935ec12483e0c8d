"""Paragraph-level text context for the phoneme encoder.

Two context streams are added to the phoneme embeddings of a sentence:

* token stream: per-token embedding (768) joined with six positional/length
  ratios, repeated once per phoneme, then conv(774 -> 384, k=5), ReLU,
  layer norm, dropout and a 384x384 projection;
* sentence stream: sentence embeddings of a clipped window around the
  current sentence run through a GRU; its final state joined with the
  projected current-sentence embedding goes through ReLU, dropout and a
  768 -> 384 linear layer, then is broadcast to every phoneme.

Token statistics (all indices 1-based, ``k`` token, ``s`` sentence, ``p``
paragraph)::

    F0 = i_ks / n_ks    F1 = i_kp / n_kp    F2 = i_sp / n_sp
    F3 = n_ks / max n_ks    F4 = n_kp / max n_kp    F5 = n_sp / max n_sp
"""
from __future__ import annotations

import hashlib
import re
import unicodedata
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import ops
from .tensor import ConfigurationError, DimensionError, Tensor

EMBED_DIM = 768
NUM_STAT_FEATURES = 6
CONTEXT_DIM = 384
CONV_KERNEL = 5
DROPOUT_RATE = 0.5
CONTEXT_SIZE = 11
ZH_PHONEMES_PER_CHAR = 3

TERMINALS = "。！？.!?"
CLOSING_QUOTES = "\"'”’」』）)》"


class InputError(ValueError):
    """Unusable input text or document."""


class ProviderError(RuntimeError):
    """An embedding provider could not supply a vector."""


class AlignmentError(DimensionError):
    """Phoneme-level streams disagree in length."""


@dataclass(frozen=True)
class Token:
    text: str
    phoneme_count: int = 1

    def __post_init__(self):
        if not self.text:
            raise InputError("token text must be non-empty")
        if int(self.phoneme_count) < 1:
            raise InputError(f"token {self.text!r}: phoneme_count must be >= 1, got {self.phoneme_count}")


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[Token, ...]
    text: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise InputError("a sentence needs at least one token")
        if not self.text:
            object.__setattr__(self, "text", "".join(t.text for t in self.tokens))

    @property
    def phoneme_counts(self) -> list[int]:
        return [t.phoneme_count for t in self.tokens]

    @property
    def num_phonemes(self) -> int:
        return sum(self.phoneme_counts)


@dataclass(frozen=True)
class ParagraphDocument:
    sentences: tuple[Sentence, ...]
    paragraph_id: str = "p0"

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        if not self.sentences:
            raise InputError("a paragraph needs at least one sentence")

    @classmethod
    def from_tokens(cls, sentences: Sequence[Sequence[str]], phoneme_count: int = 1,
                    paragraph_id: str = "p0") -> "ParagraphDocument":
        return cls(tuple(Sentence(tuple(Token(t, phoneme_count) for t in s)) for s in sentences), paragraph_id)

    @property
    def num_tokens(self) -> int:
        return sum(len(s.tokens) for s in self.sentences)

    def replace_sentence(self, index: int, sentence: Sentence) -> "ParagraphDocument":
        sents = list(self.sentences)
        sents[index] = sentence
        return ParagraphDocument(tuple(sents), self.paragraph_id)


@dataclass(frozen=True)
class CorpusStats:
    max_tokens_per_sentence: int
    max_tokens_per_paragraph: int
    max_sentences_per_paragraph: int

    def __post_init__(self):
        for name in ("max_tokens_per_sentence", "max_tokens_per_paragraph", "max_sentences_per_paragraph"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    @classmethod
    def from_documents(cls, docs: Iterable[ParagraphDocument]) -> "CorpusStats":
        docs = list(docs)
        if not docs:
            raise InputError("corpus statistics need at least one document")
        return cls(max(len(s.tokens) for d in docs for s in d.sentences),
                   max(d.num_tokens for d in docs),
                   max(len(d.sentences) for d in docs))

    def to_json(self) -> dict:
        return {"max_tokens_per_sentence": self.max_tokens_per_sentence,
                "max_tokens_per_paragraph": self.max_tokens_per_paragraph,
                "max_sentences_per_paragraph": self.max_sentences_per_paragraph}

    @classmethod
    def from_json(cls, obj: Mapping) -> "CorpusStats":
        return cls(int(obj["max_tokens_per_sentence"]), int(obj["max_tokens_per_paragraph"]),
                   int(obj["max_sentences_per_paragraph"]))


# ---------------------------------------------------------------- tokenize

def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def split_sentences(text: str) -> list[str]:
    """Split after runs of terminal punctuation, keeping trailing closing quotes."""
    pieces, buf, i = [], [], 0
    while i < len(text):
        ch = text[i]
        buf.append(ch)
        i += 1
        if ch in TERMINALS:
            while i < len(text) and text[i] in TERMINALS:
                buf.append(text[i])
                i += 1
            while i < len(text) and text[i] in CLOSING_QUOTES:
                buf.append(text[i])
                i += 1
            pieces.append("".join(buf).strip())
            buf = []
    tail = "".join(buf).strip()
    if tail:
        pieces.append(tail)
    return [p for p in pieces if p]


def default_phoneme_count(token: str, mode: str) -> int:
    """Lexicon stub: 3 per Chinese character (initial, final, tone); letters for English."""
    if mode == "zh":
        return ZH_PHONEMES_PER_CHAR
    return max(1, sum(ch.isalpha() for ch in token))


def tokenize(text: str, mode: str = "zh", lexicon: Mapping[str, int] | None = None,
             paragraph_id: str = "p0") -> ParagraphDocument:
    """Split ``text`` into sentences and tokens.

    ``"zh"``: one token per non-punctuation, non-space character.
    ``"en"``: whitespace-separated words with surrounding punctuation removed.
    ``lexicon`` overrides the stub phoneme count per token text.
    """
    if mode not in ("zh", "en"):
        raise InputError(f"unknown language mode {mode!r}")
    if not text or not text.strip():
        raise InputError("paragraph text is empty")
    lexicon = lexicon or {}
    sentences = []
    for raw in split_sentences(text.strip()):
        if mode == "zh":
            words = [ch for ch in raw if not ch.isspace() and not _is_punct(ch)]
        else:
            words = [w for w in (re.sub(r"^\W+|\W+$", "", w) for w in raw.split()) if w]
        if not words:
            continue
        tokens = tuple(Token(w, int(lexicon.get(w, default_phoneme_count(w, mode)))) for w in words)
        sentences.append(Sentence(tokens, raw))
    if not sentences:
        raise InputError("paragraph contains no tokens")
    return ParagraphDocument(tuple(sentences), paragraph_id)


# ---------------------------------------------------------------- statistics

def _ratio(n: int, cap: int, label: str) -> float:
    if n > cap:
        warnings.warn(f"{label}: observed {n} exceeds corpus maximum {cap}; clamping to 1.0", stacklevel=3)
        return 1.0
    return n / cap


def token_stats(doc: ParagraphDocument, stats: CorpusStats) -> list[np.ndarray]:
    """Per sentence, a ``[n_tokens, 6]`` array of F0..F5."""
    n_kp = doc.num_tokens
    n_sp = len(doc.sentences)
    f4 = _ratio(n_kp, stats.max_tokens_per_paragraph, "tokens per paragraph")
    f5 = _ratio(n_sp, stats.max_sentences_per_paragraph, "sentences per paragraph")
    out = []
    i_kp = 0
    for s_idx, sent in enumerate(doc.sentences, start=1):
        n_ks = len(sent.tokens)
        f3 = _ratio(n_ks, stats.max_tokens_per_sentence, "tokens per sentence")
        rows = np.empty((n_ks, NUM_STAT_FEATURES))
        for k in range(1, n_ks + 1):
            i_kp += 1
            rows[k - 1] = (k / n_ks, i_kp / n_kp, s_idx / n_sp, f3, f4, f5)
        out.append(rows)
    return out


def featurize(doc: ParagraphDocument, stats: CorpusStats) -> dict:
    """JSON-ready view of a document and its token statistics."""
    feats = token_stats(doc, stats)
    return {
        "paragraph_id": doc.paragraph_id,
        "sentences": [
            {"tokens": [{"text": t.text, "phoneme_count": t.phoneme_count, "f": row.tolist()}
                        for t, row in zip(sent.tokens, f)]}
            for sent, f in zip(doc.sentences, feats)
        ],
        "corpus_stats": stats.to_json(),
    }


# ---------------------------------------------------------------- embeddings

class EmbeddingProvider(Protocol):
    def token_embedding(self, token: str, sentence: str) -> np.ndarray: ...

    def sentence_embedding(self, sentence: str) -> np.ndarray: ...


def text_key(kind: str, text: str) -> str:
    """Container key for an imported vector: ``tok:<sha1>`` or ``sent:<sha1>``."""
    return f"{kind}:{hashlib.sha1(text.encode('utf-8')).hexdigest()}"


class HashEmbeddingProvider:
    """Deterministic unit vectors seeded by a hash of the text.

    Token vectors ignore the sentence context.
    """

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM):
        self.seed = seed
        self.dim = dim
        self._vector = lru_cache(maxsize=65536)(self._make)

    def _make(self, kind: str, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{kind}\x00{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        v = rng.standard_normal(self.dim)
        v /= np.linalg.norm(v)
        v.flags.writeable = False
        return v

    def token_embedding(self, token: str, sentence: str = "") -> np.ndarray:
        return self._vector("tok", token)

    def sentence_embedding(self, sentence: str) -> np.ndarray:
        return self._vector("sent", sentence)


def hash_embedding_provider(seed: int = 0) -> HashEmbeddingProvider:
    return HashEmbeddingProvider(seed)


class ContainerEmbeddingProvider:
    """Looks vectors up in a named-tensor mapping keyed by :func:`text_key`."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self.tensors = dict(tensors)

    @classmethod
    def from_file(cls, path) -> "ContainerEmbeddingProvider":
        from .io import load_container
        return cls(load_container(path))

    def _get(self, kind: str, text: str) -> np.ndarray:
        key = text_key(kind, text)
        try:
            vec = self.tensors[key].data
        except KeyError:
            raise ProviderError(f"no {kind} vector for {text!r} ({key})") from None
        if vec.shape != (EMBED_DIM,):
            raise ProviderError(f"{key}: expected shape ({EMBED_DIM},), got {vec.shape}")
        return vec

    def token_embedding(self, token: str, sentence: str = "") -> np.ndarray:
        return self._get("tok", token)

    def sentence_embedding(self, sentence: str) -> np.ndarray:
        return self._get("sent", sentence)


# ---------------------------------------------------------------- weights

def _param_shapes(C: int = CONTEXT_DIM) -> dict[str, tuple[int, ...]]:
    E = EMBED_DIM
    return {
        "tok.conv_w": (CONV_KERNEL, E + NUM_STAT_FEATURES, C), "tok.conv_b": (C,),
        "tok.ln_gain": (C,), "tok.ln_bias": (C,),
        "tok.proj_w": (C, C), "tok.proj_b": (C,),
        "sent.in_w": (E, C), "sent.in_b": (C,),
        "sent.gru_wz": (C, C), "sent.gru_uz": (C, C), "sent.gru_bz": (C,),
        "sent.gru_wr": (C, C), "sent.gru_ur": (C, C), "sent.gru_br": (C,),
        "sent.gru_wh": (C, C), "sent.gru_uh": (C, C), "sent.gru_bh": (C,),
        "sent.out_w": (2 * C, C), "sent.out_b": (C,),
    }


@dataclass(frozen=True, eq=False)
class ContextEncoderWeights:
    params: dict[str, Tensor]
    dropout_rate: float = DROPOUT_RATE

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dim(self) -> int:
        return self.params["tok.proj_b"].shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int = CONTEXT_DIM, scale: float = 0.05) -> "ContextEncoderWeights":
        params = {}
        for name, shape in _param_shapes(dim).items():
            if name.endswith("ln_gain"):
                params[name] = Tensor(np.ones(shape))
            elif name.endswith("ln_bias"):
                params[name] = Tensor(np.zeros(shape))
            else:
                params[name] = Tensor(rng.uniform(-scale, scale, size=shape))
        return cls(params)

    @classmethod
    def zeros(cls, dim: int = CONTEXT_DIM) -> "ContextEncoderWeights":
        return cls({name: Tensor(np.zeros(shape)) for name, shape in _param_shapes(dim).items()})

    def named(self, prefix: str = "ctx") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}

    @classmethod
    def from_named(cls, tensors: Mapping[str, Tensor], prefix: str = "ctx",
                   dim: int = CONTEXT_DIM) -> "ContextEncoderWeights":
        params = {}
        for name, shape in _param_shapes(dim).items():
            key = f"{prefix}.{name}"
            if key not in tensors or tensors[key].shape != shape:
                raise ConfigurationError(f"checkpoint entry {key} missing or not shaped {shape}")
            params[name] = tensors[key]
        return cls(params)


# ---------------------------------------------------------------- encoders

@dataclass(frozen=True)
class ContextWindow:
    center: int
    sentences: tuple[Sentence, ...]
    center_offset: int

    @property
    def current(self) -> Sentence:
        return self.sentences[self.center_offset]


def context_window(doc: ParagraphDocument, center: int, size: int = CONTEXT_SIZE) -> ContextWindow:
    """``size // 2`` sentences either side of ``center``, clipped at the paragraph edges."""
    if size < 1 or size % 2 == 0:
        raise ConfigurationError(f"context size must be a positive odd number, got {size}")
    if not 0 <= center < len(doc.sentences):
        raise InputError(f"sentence index {center} outside paragraph of {len(doc.sentences)}")
    half = size // 2
    lo = max(0, center - half)
    hi = min(len(doc.sentences), center + half + 1)
    return ContextWindow(center, doc.sentences[lo:hi], center - lo)


def token_context_embedding(doc: ParagraphDocument, sentence: int, features: Sequence[np.ndarray],
                            provider: EmbeddingProvider, weights: ContextEncoderWeights,
                            training: bool = False, seed: int = 0) -> Tensor:
    """Token stream for one sentence, ``[phonemes, dim]`` (dim 384 by default)."""
    sent = doc.sentences[sentence]
    feats = np.asarray(features[sentence])
    if feats.shape != (len(sent.tokens), NUM_STAT_FEATURES):
        raise DimensionError(f"sentence {sentence}: features {feats.shape} for {len(sent.tokens)} tokens")
    rows = np.empty((len(sent.tokens), EMBED_DIM + NUM_STAT_FEATURES))
    for k, tok in enumerate(sent.tokens):
        try:
            vec = np.asarray(provider.token_embedding(tok.text, sent.text), dtype=np.float64)
        except ProviderError as exc:
            raise ProviderError(f"sentence {sentence}, token {k}: {exc}") from exc
        except Exception as exc:
            raise ProviderError(f"sentence {sentence}, token {k}: provider failed: {exc!r}") from exc
        if vec.shape != (EMBED_DIM,):
            raise ProviderError(f"sentence {sentence}, token {k}: embedding shape {vec.shape}")
        rows[k, :EMBED_DIM] = vec
        rows[k, EMBED_DIM:] = feats[k]
    h = ops.repeat_rows(Tensor(rows), sent.phoneme_counts)
    h = ops.relu(ops.conv1d(h, weights["tok.conv_w"], weights["tok.conv_b"]))
    h = ops.layer_norm(h, weights["tok.ln_gain"], weights["tok.ln_bias"])
    h = ops.dropout(h, weights.dropout_rate, seed, training)
    return ops.add(ops.matmul(h, weights["tok.proj_w"]), weights["tok.proj_b"])


def gru_cell(x: Tensor, h: Tensor, weights: ContextEncoderWeights) -> Tensor:
    """One GRU step on row vectors ``x`` and state ``h``, both ``[1, dim]``."""
    w = weights
    z = ops.sigmoid(ops.add(ops.add(ops.matmul(x, w["sent.gru_wz"]), ops.matmul(h, w["sent.gru_uz"])), w["sent.gru_bz"]))
    r = ops.sigmoid(ops.add(ops.add(ops.matmul(x, w["sent.gru_wr"]), ops.matmul(h, w["sent.gru_ur"])), w["sent.gru_br"]))
    cand = ops.tanh(ops.add(ops.add(ops.matmul(x, w["sent.gru_wh"]),
                                    ops.matmul(ops.mul(r, h), w["sent.gru_uh"])), w["sent.gru_bh"]))
    return ops.add(ops.mul(ops.sub(1.0, z), h), ops.mul(z, cand))


def paragraph_representation(window: ContextWindow, provider: EmbeddingProvider,
                             weights: ContextEncoderWeights) -> tuple[Tensor, Tensor]:
    """GRU summary of the window and the projected current-sentence embedding, both ``[1, dim]``."""
    embs = []
    for s in window.sentences:
        try:
            vec = np.asarray(provider.sentence_embedding(s.text), dtype=np.float64)
        except Exception as exc:
            raise ProviderError(f"sentence embedding for {s.text!r}: {exc}") from exc
        if vec.shape != (EMBED_DIM,):
            raise ProviderError(f"sentence embedding shape {vec.shape} for {s.text!r}")
        embs.append(vec)
    projected = ops.add(ops.matmul(Tensor(np.stack(embs)), weights["sent.in_w"]), weights["sent.in_b"])
    h = Tensor(np.zeros((1, weights.dim)))
    for step in range(len(embs)):
        h = gru_cell(projected[step:step + 1], h, weights)
    current = projected[window.center_offset:window.center_offset + 1]
    return h, current


def sentence_context_embedding(window: ContextWindow, provider: EmbeddingProvider,
                               weights: ContextEncoderWeights, training: bool = False,
                               seed: int = 0) -> Tensor:
    """Sentence stream broadcast over the current sentence, ``[phonemes, dim]``."""
    pcr, current = paragraph_representation(window, provider, weights)
    h = ops.relu(ops.concat([pcr, current], axis=1))
    h = ops.dropout(h, weights.dropout_rate, seed, training)
    h = ops.add(ops.matmul(h, weights["sent.out_w"]), weights["sent.out_b"])
    return ops.repeat_rows(h, [window.current.num_phonemes])


def fuse(phoneme_embeddings: Tensor, token_ctx: Tensor, sent_ctx: Tensor) -> Tensor:
    lengths = (phoneme_embeddings.shape[0], token_ctx.shape[0], sent_ctx.shape[0])
    if len(set(lengths)) != 1:
        raise AlignmentError(f"cannot fuse streams of lengths phoneme={lengths[0]}, "
                             f"token={lengths[1]}, sentence={lengths[2]}")
    return ops.add(ops.add(phoneme_embeddings, token_ctx), sent_ctx)


@dataclass
class ContextualEncoder:
    """Bundles weights, provider and corpus statistics for per-sentence use."""

    weights: ContextEncoderWeights
    provider: EmbeddingProvider
    stats: CorpusStats | None = None
    context_size: int = CONTEXT_SIZE
    training: bool = False
    seed: int = 0

    def encode(self, doc: ParagraphDocument, sentence: int) -> tuple[Tensor, Tensor]:
        stats = self.stats or CorpusStats.from_documents([doc])
        feats = token_stats(doc, stats)
        tok = token_context_embedding(doc, sentence, feats, self.provider, self.weights,
                                      self.training, self.seed + 2 * sentence)
        sent = sentence_context_embedding(context_window(doc, sentence, self.context_size),
                                          self.provider, self.weights, self.training,
                                          self.seed + 2 * sentence + 1)
        return tok, sent
