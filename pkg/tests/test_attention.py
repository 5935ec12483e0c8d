import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxspeech import ops
from ctxspeech.attention import (AttentionConfig, AttentionWeights, Role, RpeConfig, Variant, apply_rpe,
                                 kernel_attention_oracle, kernel_attention_weights, linearized_attention,
                                 multi_head_attention, rpe_similarity, softmax_attention)
from ctxspeech.tensor import ContractError, DimensionError, Tensor, count_macs


def rel_diff(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def two_loop_softmax(q, k, v):
    out = np.zeros((q.shape[0], v.shape[1]))
    scale = 1.0 / math.sqrt(q.shape[1])
    for i in range(q.shape[0]):
        logits = [float(q[i] @ k[j]) * scale for j in range(k.shape[0])]
        top = max(logits)
        w = [math.exp(s - top) for s in logits]
        total = sum(w)
        for j in range(k.shape[0]):
            out[i] += w[j] / total * v[j]
    return out


def perm_matrix(perm):
    d = len(perm)
    m = np.zeros((d, d))
    m[np.arange(d), perm] = 1.0
    return m


class TestSoftmaxAttention:
    def test_single_key_returns_value_row(self, rng):
        q, k, v = rng.standard_normal((5, 4)), rng.standard_normal((1, 4)), rng.standard_normal((1, 3))
        np.testing.assert_allclose(softmax_attention(q, k, v).data, np.repeat(v, 5, axis=0), rtol=0, atol=1e-15)

    def test_equal_logits_give_mean(self, rng):
        q = np.array([[1.0, 0.0]])
        k = np.array([[0.0, 1.0], [0.0, -2.0], [0.0, 3.0]])
        v = rng.standard_normal((3, 2))
        np.testing.assert_allclose(softmax_attention(q, k, v).data[0], v.mean(axis=0), atol=1e-15)

    def test_against_two_loop_oracle(self, rng):
        q, k, v = (rng.standard_normal((8, 4)) for _ in range(3))
        assert np.max(np.abs(softmax_attention(q, k, v).data - two_loop_softmax(q, k, v))) < 1e-12

    def test_shape_errors(self, rng):
        with pytest.raises(DimensionError):
            softmax_attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)))
        with pytest.raises(DimensionError):
            softmax_attention(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 3)))


class TestKernelOracle:
    def test_single_key(self, rng):
        q, k, v = rng.standard_normal((4, 3)), rng.standard_normal((1, 3)), rng.standard_normal((1, 2))
        np.testing.assert_allclose(kernel_attention_oracle(q, k, v).data, np.repeat(v, 4, axis=0), atol=1e-15)

    def test_all_ones(self):
        ones = np.ones((4, 3))
        np.testing.assert_allclose(kernel_attention_oracle(ones, ones, ones).data, ones, atol=1e-15)

    def test_weights_positive_and_normalized(self, rng):
        for _ in range(20):
            lq, lk, d = rng.integers(1, 20, size=3)
            w = kernel_attention_weights(rng.standard_normal((lq, d)) * 3, rng.standard_normal((lk, d)) * 3)
            assert np.all(w > 0)
            assert np.max(np.abs(w.sum(axis=1) - 1.0)) < 1e-12

    def test_zero_normalizer_is_contract_error(self):
        with pytest.raises(ContractError):
            kernel_attention_oracle(np.zeros((1, 2)), np.zeros((1, 2)), np.ones((1, 2)), kernel=None)


class TestLinearizedAttention:
    def test_single_key_exact(self, rng):
        q, k, v = rng.standard_normal((6, 3)), rng.standard_normal((1, 3)), rng.standard_normal((1, 2))
        np.testing.assert_allclose(linearized_attention(q, k, v).data, np.repeat(v, 6, axis=0), atol=1e-15)

    def test_matches_oracle_16x8(self, rng):
        q, k, v = (rng.standard_normal((16, 8)) for _ in range(3))
        assert rel_diff(linearized_attention(q, k, v).data, kernel_attention_oracle(q, k, v).data) < 1e-10

    def test_matches_oracle_50_random(self, rng):
        worst = 0.0
        for _ in range(50):
            lq, lk = rng.integers(1, 65, size=2)
            d, dv = rng.integers(1, 33, size=2)
            q, k = rng.standard_normal((lq, d)), rng.standard_normal((lk, d))
            v = rng.standard_normal((lk, dv))
            worst = max(worst, rel_diff(linearized_attention(q, k, v).data, kernel_attention_oracle(q, k, v).data))
        assert worst < 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 16), st.integers(0, 2**32 - 1))
    def test_matches_oracle_property(self, lq, lk, d, seed):
        r = np.random.default_rng(seed)
        q, k, v = r.standard_normal((lq, d)) * 2, r.standard_normal((lk, d)) * 2, r.standard_normal((lk, d))
        assert rel_diff(linearized_attention(q, k, v).data, kernel_attention_oracle(q, k, v).data) < 1e-10

    def test_doubling_keys_at_most_doubles_macs(self, rng):
        d = 16
        q = rng.standard_normal((32, d))
        counts = []
        for lk in (64, 128):
            with count_macs() as c:
                linearized_attention(q, rng.standard_normal((lk, d)), rng.standard_normal((lk, d)))
            counts.append(c.macs)
        assert counts[1] <= 2 * counts[0]

    def test_mac_growth_linear_vs_quadratic(self, rng):
        d = 16

        def macs(fn, L):
            x = rng.standard_normal((L, d))
            with count_macs() as c:
                fn(x, x, x)
            return c.macs

        lin = macs(linearized_attention, 256) / macs(linearized_attention, 128)
        soft = macs(softmax_attention, 256) / macs(softmax_attention, 128)
        assert lin == pytest.approx(2.0, rel=1e-9)
        assert soft == pytest.approx(4.0, rel=1e-9)


class TestRpeConfig:
    def test_rejects_non_permutation(self):
        with pytest.raises(ValueError):
            RpeConfig(np.array([0, 0, 1]))
        with pytest.raises(ValueError):
            RpeConfig(np.array([0, 1, 2]), decay=0.0)

    def test_matrix_has_one_entry_per_row_and_column(self):
        m = RpeConfig.random(9, seed=3).matrix()
        assert np.all(m.sum(axis=0) == 1) and np.all(m.sum(axis=1) == 1)

    def test_powers_match_dense_matrix_powers(self):
        rpe = RpeConfig.random(7, seed=5, max_position=20)
        P = rpe.matrix(1)
        for p in (-30, -3, -1, 0, 1, 2, 5, 20, 21, 57):
            np.testing.assert_array_equal(rpe.matrix(p), np.linalg.matrix_power(P if p >= 0 else P.T, abs(p)))

    @pytest.mark.parametrize("d", [1, 2, 3, 4, 5, 6])
    def test_factorial_power_is_identity(self, d):
        rpe = RpeConfig.random(d, seed=d)
        P = rpe.matrix()
        np.testing.assert_array_equal(np.linalg.matrix_power(P, math.factorial(d)), np.eye(d))

    def test_permutation_then_inverse_is_identity(self):
        rpe = RpeConfig.random(12, seed=1)
        inv = rpe.inverse()
        np.testing.assert_array_equal(rpe.permutation[inv.permutation], np.arange(12))
        np.testing.assert_array_equal(rpe.matrix() @ inv.matrix(), np.eye(12))

    def test_table_and_cycle_paths_agree(self):
        rpe = RpeConfig.random(10, seed=2, max_position=8)
        positions = np.arange(-20, 21)
        np.testing.assert_array_equal(rpe.indices(positions), rpe._from_cycles(positions))


class TestApplyRpe:
    def test_identity_permutation_is_noop(self, rng):
        x = rng.random((5, 4)) + 0.1
        out = apply_rpe(x, range(5), RpeConfig(np.arange(4)), Role.QUERY)
        np.testing.assert_array_equal(out.data, x)

    def test_position_zero_unchanged(self, rng):
        x = rng.random((1, 6))
        for role in Role:
            out = apply_rpe(x, [0], RpeConfig.random(6, seed=4, decay=0.7), role)
            np.testing.assert_array_equal(out.data, x)

    def test_row_matches_matrix_power_times_decay(self, rng):
        rpe = RpeConfig.random(5, seed=8, decay=0.9)
        x = rng.random((4, 5))
        positions = [3, -2, 0, 11]
        q = apply_rpe(x, positions, rpe, Role.QUERY).data
        k = apply_rpe(x, positions, rpe, Role.KEY).data
        for row, p in enumerate(positions):
            Pp = np.linalg.matrix_power(rpe.matrix(1) if p >= 0 else rpe.matrix(1).T, abs(p))
            np.testing.assert_allclose(q[row], 0.9 ** p * Pp @ x[row], rtol=1e-14)
            np.testing.assert_allclose(k[row], 0.9 ** -p * Pp @ x[row], rtol=1e-14)

    def test_similarity_depends_on_offset(self, rng):
        d = 8
        rpe = RpeConfig.random(d, seed=11)
        for _ in range(20):
            fq, fk = rng.random(d) + 0.01, rng.random(d) + 0.01
            i, j = rng.integers(-50, 50, size=2)
            expected = fq @ np.linalg.matrix_power(rpe.matrix(1) if j >= i else rpe.matrix(1).T, abs(j - i)) @ fk
            assert abs(rpe_similarity(fq, fk, i, j, rpe) - expected) <= 1e-10 * abs(expected)

    @pytest.mark.parametrize("offset", [-7, 13, 100])
    def test_similarity_shift_invariant(self, rng, offset):
        rpe = RpeConfig.random(6, seed=0)
        fq, fk = rng.random(6), rng.random(6)
        for i, j in [(0, 0), (2, 9), (15, 4)]:
            base = rpe_similarity(fq, fk, i, j, rpe)
            assert abs(rpe_similarity(fq, fk, i + offset, j + offset, rpe) - base) <= 1e-10 * abs(base)

    def test_decay_overflow_is_contract_error(self):
        rpe = RpeConfig.random(3, seed=0, decay=10.0)
        with pytest.raises(ContractError):
            apply_rpe(np.ones((1, 3)), [400], rpe, Role.QUERY)

    def test_shape_checks(self):
        rpe = RpeConfig.random(3, seed=0)
        with pytest.raises(DimensionError):
            apply_rpe(np.ones((2, 3)), [0], rpe, Role.KEY)
        with pytest.raises(DimensionError):
            apply_rpe(np.ones((2, 4)), [0, 1], rpe, Role.KEY)


def _weights(rng, D, scale=0.3):
    return AttentionWeights(*(Tensor(rng.standard_normal((D, D)) * scale) for _ in range(4)))


class TestMultiHead:
    def test_hidden_is_heads_times_head_dim(self):
        assert AttentionConfig(4, 96).hidden == 384

    def test_single_head_single_key(self, rng):
        cfg = AttentionConfig(1, 6, Variant.SOFTMAX)
        w = _weights(rng, 6)
        xq, xkv = rng.standard_normal((3, 6)), rng.standard_normal((1, 6))
        expected = np.repeat(xkv @ w.w_v.data @ w.w_o.data, 3, axis=0)
        np.testing.assert_allclose(multi_head_attention(xq, xkv, w, cfg).data, expected, atol=1e-13)

    def test_linearized_equals_per_head_oracle(self, rng):
        cfg = AttentionConfig(3, 4, Variant.LINEARIZED)
        w = _weights(rng, 12)
        xq, xkv = rng.standard_normal((7, 12)), rng.standard_normal((9, 12))
        q, k, v = xq @ w.w_q.data, xkv @ w.w_k.data, xkv @ w.w_v.data
        heads = [kernel_attention_oracle(q[:, h * 4:(h + 1) * 4], k[:, h * 4:(h + 1) * 4],
                                         v[:, h * 4:(h + 1) * 4]).data for h in range(3)]
        expected = np.concatenate(heads, axis=1) @ w.w_o.data
        assert rel_diff(multi_head_attention(xq, xkv, w, cfg).data, expected) < 1e-10

    def test_linearized_rpe_equals_oracle_on_rotated_features(self, rng):
        cfg = AttentionConfig(2, 5, Variant.LINEARIZED_RPE, seed=3)
        w = _weights(rng, 10)
        x = rng.standard_normal((8, 10))
        q, k, v = x @ w.w_q.data, x @ w.w_k.data, x @ w.w_v.data
        pos = np.arange(8)
        heads = []
        for h in range(2):
            cols = slice(h * 5, (h + 1) * 5)
            fq = apply_rpe(ops.elu_plus_one(q[:, cols]), pos, cfg.head_rpes[h], Role.QUERY).data
            fk = apply_rpe(ops.elu_plus_one(k[:, cols]), pos, cfg.head_rpes[h], Role.KEY).data
            heads.append(kernel_attention_oracle(fq, fk, v[:, cols], kernel=None).data)
        expected = np.concatenate(heads, axis=1) @ w.w_o.data
        assert rel_diff(multi_head_attention(x, x, w, cfg).data, expected) < 1e-10

    def test_linearized_invariant_to_key_value_row_permutation(self, rng):
        cfg = AttentionConfig(2, 3, Variant.LINEARIZED)
        w = _weights(rng, 6)
        xq, xkv = rng.standard_normal((4, 6)), rng.standard_normal((10, 6))
        perm = rng.permutation(10)
        a = multi_head_attention(xq, xkv, w, cfg).data
        b = multi_head_attention(xq, xkv[perm], w, cfg).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_rpe_position_origin_is_neutral(self, rng):
        cfg = AttentionConfig(2, 4, Variant.LINEARIZED_RPE, seed=9)
        w = _weights(rng, 8)
        x = rng.standard_normal((12, 8))
        base = multi_head_attention(x, x, w, cfg, np.arange(12), np.arange(12)).data
        for offset in (-7, 13, 100):
            pos = np.arange(12) + offset
            shifted = multi_head_attention(x, x, w, cfg, pos, pos).data
            assert rel_diff(shifted, base) < 1e-10

    def test_rpe_variant_is_position_sensitive(self, rng):
        cfg = AttentionConfig(1, 4, Variant.LINEARIZED_RPE, seed=2)
        w = _weights(rng, 4)
        x = rng.standard_normal((6, 4))
        perm = np.array([1, 0, 2, 3, 4, 5])
        a = multi_head_attention(x, x[perm], w, cfg).data
        b = multi_head_attention(x, x, w, cfg).data
        assert np.max(np.abs(a - b)) > 1e-8

    def test_per_head_permutations(self):
        distinct = AttentionConfig(3, 16, Variant.LINEARIZED_RPE, seed=1)
        assert not np.array_equal(distinct.head_rpes[0].permutation, distinct.head_rpes[1].permutation)
        shared = AttentionConfig(3, 16, Variant.LINEARIZED_RPE, seed=1, shared_permutation=True)
        assert shared.head_rpes[0] is shared.head_rpes[2]
        assert AttentionConfig(3, 16, Variant.LINEARIZED).head_rpes == ()

    def test_variants_share_shape_but_differ(self, rng):
        w = _weights(rng, 8)
        x = rng.standard_normal((5, 8))
        outs = [multi_head_attention(x, x, w, AttentionConfig(2, 4, v)).data for v in Variant]
        assert all(o.shape == (5, 8) for o in outs)
        assert np.max(np.abs(outs[0] - outs[1])) > 1e-6 and np.max(np.abs(outs[1] - outs[2])) > 1e-6

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            multi_head_attention(np.ones((2, 5)), np.ones((2, 5)), _weights(rng, 6), AttentionConfig(2, 3))
