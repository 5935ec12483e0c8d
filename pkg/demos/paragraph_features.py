"""
Token statistics and context streams
====================================

Six ratios locate every token inside its sentence and paragraph; they are
joined with a 768-wide token embedding before the token-stream convolution.
"""
import numpy as np

from ctxspeech.context import (ContextEncoderWeights, ContextualEncoder, CorpusStats, hash_embedding_provider,
                               token_stats, tokenize)

doc = tokenize("今天天气很好。我们去公园散步吧！你觉得怎么样？")
stats = CorpusStats(max_tokens_per_sentence=10, max_tokens_per_paragraph=30, max_sentences_per_paragraph=6)

np.set_printoptions(precision=3, suppress=True)
for i, f in enumerate(token_stats(doc, stats)):
    print(f"sentence {i}: {''.join(t.text for t in doc.sentences[i].tokens)}")
    print(f)

encoder = ContextualEncoder(ContextEncoderWeights.init(np.random.default_rng(0)), hash_embedding_provider(0), stats)
tok, sent = encoder.encode(doc, 1)
print("token stream", tok.shape, " sentence stream", sent.shape,
      " phonemes", doc.sentences[1].num_phonemes)
