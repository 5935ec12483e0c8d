"""
Carrying state across sentences
===============================

Each block sees the cached inputs of the previous segment in front of the
current one.  Gradients stop at the cache.
"""
import numpy as np

from ctxspeech import GradTape, Tensor, backward, ops
from ctxspeech.conformer import StackConfig, init_stack, stack_forward
from ctxspeech.memory import MemoryConfig, new_memory, reset

cfg = StackConfig(num_blocks=2, hidden=16, num_heads=2)
blocks = init_stack(cfg, np.random.default_rng(0))
memory = new_memory(MemoryConfig(num_layers=2, width=16, mem_len_encoder=8))

rng = np.random.default_rng(1)
segments = [Tensor(rng.standard_normal((n, 16))) for n in (12, 5, 9)]
for i, seg in enumerate(segments):
    trace = []
    out, memory = stack_forward(seg, blocks, cfg, memory, trace)
    print(f"segment {i}: length {seg.shape[0]}, (attended, kept) per block {trace}, cache {memory.lengths}")

# The cached frames receive an exactly-zero gradient; the current input does not.
x = Tensor(segments[0].numpy(), requires_grad=True)
cached = type(memory)(tuple(Tensor(c.numpy(), requires_grad=True) for c in memory.caches), 8, 16)
with GradTape() as tape:
    out, _ = stack_forward(x, blocks, cfg, cached)
    loss = ops.sum_(ops.mul(out, out))
grads = backward(tape, loss)
print("grad x range:", grads.of(x).min(), grads.of(x).max())
print("grad cache nonzeros:", sum(int(np.count_nonzero(grads.of(c))) for c in cached.caches))

# After a reset the stack behaves as if nothing came before.
a, _ = stack_forward(segments[1], blocks, cfg, reset(memory))
b, _ = stack_forward(segments[1], blocks, cfg, new_memory(MemoryConfig(num_layers=2, width=16, mem_len_encoder=8)))
print("reset equals fresh:", np.array_equal(a.numpy(), b.numpy()))
