import numpy as np
import pytest

from ctxspeech.conformer import StackConfig, init_stack, stack_forward
from ctxspeech.memory import MemoryConfig, SegmentMemory, new_memory, reset, update
from ctxspeech.tensor import ConfigurationError, Tensor


def states(rng, n, L, width):
    return [Tensor(rng.standard_normal((L, width))) for _ in range(n)]


def test_default_capacities():
    cfg = MemoryConfig()
    enc, dec = new_memory(cfg, "encoder"), new_memory(cfg, "decoder")
    assert (enc.capacity, dec.capacity) == (128, 64)
    assert enc.num_layers == dec.num_layers == 4
    assert enc.is_empty() and enc.lengths == [0, 0, 0, 0]
    assert enc.caches[0].shape == (0, 384)


def test_unknown_stack_rejected():
    with pytest.raises(ValueError):
        new_memory(MemoryConfig(), "middle")


def test_memories_are_independent(rng):
    cfg = MemoryConfig(num_layers=2, width=3)
    a, b = new_memory(cfg), new_memory(cfg)
    a2 = update(a, states(rng, 2, 5, 3))
    assert b.is_empty() and a.is_empty()
    assert a2.lengths == [5, 5]


def test_long_segment_keeps_last_frames(rng):
    mem = new_memory(MemoryConfig(num_layers=4, width=6))
    layer = states(rng, 4, 200, 6)
    out = update(mem, layer)
    assert out.lengths == [128] * 4
    for cache, state in zip(out.caches, layer):
        np.testing.assert_array_equal(cache.data, state.data[72:200])


def test_short_segment_kept_whole(rng):
    mem = new_memory(MemoryConfig(num_layers=2, width=6))
    layer = states(rng, 2, 50, 6)
    out = update(mem, layer)
    assert out.lengths == [50, 50]
    np.testing.assert_array_equal(out.caches[1].data, layer[1].data)


def test_update_replaces_rather_than_appends(rng):
    mem = new_memory(MemoryConfig(num_layers=1, width=2, mem_len_encoder=10))
    first = update(mem, states(rng, 1, 8, 2))
    second_states = states(rng, 1, 4, 2)
    second = update(first, second_states)
    assert second.lengths == [4]
    np.testing.assert_array_equal(second.caches[0].data, second_states[0].data)
    assert second.segment_index == 2


def test_caches_are_detached_copies(rng):
    layer = [Tensor(rng.standard_normal((3, 2)), requires_grad=True)]
    out = update(new_memory(MemoryConfig(num_layers=1, width=2)), layer)
    cache = out.caches[0]
    assert cache.stop_grad and not cache.requires_grad
    assert not np.shares_memory(cache.data, layer[0].data)


def test_shape_errors(rng):
    mem = new_memory(MemoryConfig(num_layers=2, width=4))
    with pytest.raises(ConfigurationError):
        update(mem, states(rng, 3, 5, 4))
    with pytest.raises(ConfigurationError):
        update(mem, states(rng, 2, 5, 5))


def test_reset_is_idempotent(rng):
    mem = update(new_memory(MemoryConfig(num_layers=2, width=4)), states(rng, 2, 5, 4))
    once = reset(mem)
    assert once.is_empty() and once.segment_index == 0
    assert reset(once).same_as(once)
    assert once.same_as(new_memory(MemoryConfig(num_layers=2, width=4)))


def test_forward_after_reset_matches_fresh(rng):
    cfg = StackConfig(num_blocks=2, hidden=8, num_heads=2)
    blocks = init_stack(cfg, rng)
    fresh = new_memory(MemoryConfig(num_layers=2, width=8))
    x1, x2 = Tensor(rng.standard_normal((6, 8))), Tensor(rng.standard_normal((5, 8)))
    _, used = stack_forward(x1, blocks, cfg, fresh)
    a, mem_a = stack_forward(x2, blocks, cfg, reset(used))
    b, mem_b = stack_forward(x2, blocks, cfg, fresh)
    np.testing.assert_array_equal(a.data, b.data)
    assert mem_a.same_as(mem_b)


def test_named_exposes_layers(rng):
    mem = new_memory(MemoryConfig(num_layers=3, width=2))
    assert list(mem.named("enc_mem")) == ["enc_mem.layer0", "enc_mem.layer1", "enc_mem.layer2"]


def test_zero_capacity_memory_is_inert(rng):
    cfg = StackConfig(num_blocks=1, hidden=4, num_heads=1)
    blocks = init_stack(cfg, rng)
    mem = new_memory(MemoryConfig(num_layers=1, width=4, mem_len_encoder=0))
    x = Tensor(rng.standard_normal((3, 4)))
    out, new = stack_forward(x, blocks, cfg, mem)
    assert new.lengths == [0]
    np.testing.assert_array_equal(out.data, stack_forward(x, blocks, cfg)[0].data)
    assert isinstance(new, SegmentMemory)
