"""
Factored kernel attention against the double loop
=================================================

The factored form never builds the L x L weight matrix, yet it gives the
same numbers as summing over every (query, key) pair.
"""
import numpy as np

from ctxspeech import count_macs
from ctxspeech.attention import kernel_attention_oracle, kernel_attention_weights, linearized_attention

rng = np.random.default_rng(0)
q, k, v = (rng.standard_normal((16, 8)) for _ in range(3))

fast = linearized_attention(q, k, v).numpy()
slow = kernel_attention_oracle(q, k, v).numpy()
print("max |fast - slow| =", np.max(np.abs(fast - slow)))

# The implied weights are positive and each row sums to one.
w = kernel_attention_weights(q, k)
print("min weight:", w.min(), " row sums:", w.sum(axis=1)[:4], "...")

# Work grows linearly with length for the factored form.
for L in (128, 256, 512):
    x = rng.standard_normal((L, 32))
    with count_macs() as c:
        linearized_attention(x, x, x)
    print(f"L={L:4d}  multiply-adds={c.macs}")
