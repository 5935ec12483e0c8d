"""
Relative positions from a random permutation
============================================

Query and key features at position p are shuffled by the p-th power of a
fixed permutation.  Their dot product then depends only on the offset
between the two positions.
"""
import numpy as np

from ctxspeech.attention import Role, RpeConfig, apply_rpe, rpe_similarity

rpe = RpeConfig.random(8, seed=3)
print("permutation:", rpe.permutation)
order = next(p for p in range(1, 10_000) if np.array_equal(rpe.power(p), np.arange(8)))
print("order (smallest p with P^p = I):", order)

rng = np.random.default_rng(1)
fq, fk = rng.random(8), rng.random(8)
for shift in (0, -7, 13, 100):
    print(f"positions ({2 + shift}, {9 + shift}): similarity {rpe_similarity(fq, fk, 2 + shift, 9 + shift, rpe):.12f}")

# Shuffling is a gather, so the encoded rows are a rearrangement of the input.
x = np.arange(8.0)[None, :].repeat(3, axis=0)
print(apply_rpe(x, [0, 1, 2], rpe, Role.QUERY).numpy())

# A decay r != 1 scales row p by r**p for queries and r**-p for keys.
decayed = RpeConfig(rpe.permutation, decay=0.9)
print("query row norms:", np.linalg.norm(apply_rpe(x, [0, 1, 2], decayed, Role.QUERY).numpy(), axis=1))
