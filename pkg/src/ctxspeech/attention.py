"""Softmax attention, kernelized linear attention and permutation-based
relative position encoding.

Linear attention factors the kernel similarity so the key/value summary
``S = phi(K)^T V`` and normalizer ``z = sum_j phi(K_j)`` are built once and
shared by every query, which makes cost linear in sequence length.  The
relative position encoding rotates kernel features by powers of a fixed
feature permutation ``P_B``: queries at position ``i`` get ``r^i P_B^i`` and
keys at ``j`` get ``r^-j P_B^j``, so their inner product only depends on
``j - i``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .tensor import ContractError, DimensionError, Tensor, as_tensor


class Variant(str, enum.Enum):
    SOFTMAX = "softmax"
    LINEARIZED = "linearized"
    LINEARIZED_RPE = "linearized_rpe"


class Kernel(str, enum.Enum):
    ELU_PLUS_ONE = "elu_plus_one"


class Role(str, enum.Enum):
    QUERY = "query"
    KEY = "key"


def _kernel_fn(kernel):
    if kernel is None:
        return None
    if Kernel(kernel) is Kernel.ELU_PLUS_ONE:
        return ops.elu_plus_one
    raise ValueError(f"unsupported kernel {kernel!r}")


@dataclass(frozen=True, eq=False)
class RpeConfig:
    """Feature permutation (0-based index array) plus decay ``r``.

    Powers ``B^p`` for ``0 <= p <= max_position`` are tabulated at
    construction; others are derived from the cycle decomposition.
    """

    permutation: np.ndarray
    decay: float = 1.0
    seed: int | None = None
    max_position: int = 2048
    _table: np.ndarray = field(init=False, repr=False)
    _inv_table: np.ndarray = field(init=False, repr=False)
    _cycle_members: np.ndarray = field(init=False, repr=False)
    _cycle_start: np.ndarray = field(init=False, repr=False)
    _cycle_len: np.ndarray = field(init=False, repr=False)
    _cycle_pos: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.intp)
        d = perm.size
        if perm.ndim != 1 or d == 0 or not np.array_equal(np.sort(perm), np.arange(d)):
            raise ValueError("permutation must be a bijection on range(d)")
        if not self.decay > 0:
            raise ValueError(f"decay must be positive, got {self.decay}")
        perm.flags.writeable = False
        set_ = object.__setattr__
        set_(self, "permutation", perm)

        members, start, length, pos = [], np.empty(d, np.intp), np.empty(d, np.intp), np.empty(d, np.intp)
        seen = np.zeros(d, bool)
        for i in range(d):
            if seen[i]:
                continue
            base = len(members)
            cycle = []
            j = i
            while not seen[j]:
                seen[j] = True
                cycle.append(j)
                j = perm[j]
            for offset, m in enumerate(cycle):
                start[m], length[m], pos[m] = base, len(cycle), offset
            members.extend(cycle)
        set_(self, "_cycle_members", np.asarray(members, np.intp))
        set_(self, "_cycle_start", start)
        set_(self, "_cycle_len", length)
        set_(self, "_cycle_pos", pos)

        steps = np.arange(self.max_position + 1)
        table = self._from_cycles(steps)
        inv = self._from_cycles(-steps)
        table.flags.writeable = False
        inv.flags.writeable = False
        set_(self, "_table", table)
        set_(self, "_inv_table", inv)

    @classmethod
    def random(cls, d: int, seed: int, decay: float = 1.0, max_position: int = 2048) -> "RpeConfig":
        perm = np.random.default_rng(seed).permutation(d)
        return cls(perm, decay=decay, seed=seed, max_position=max_position)

    @property
    def dim(self) -> int:
        return self.permutation.size

    def _from_cycles(self, powers: np.ndarray) -> np.ndarray:
        powers = np.asarray(powers, dtype=np.intp)[:, None]
        offs = (self._cycle_pos[None, :] + powers) % self._cycle_len[None, :]
        return self._cycle_members[self._cycle_start[None, :] + offs]

    def indices(self, positions: Sequence[int]) -> np.ndarray:
        """Row ``l`` holds the index array of ``B^positions[l]``."""
        p = np.asarray(positions, dtype=np.intp)
        if p.size and p.min() >= -self.max_position and p.max() <= self.max_position:
            return np.where((p >= 0)[:, None], self._table[np.abs(p)], self._inv_table[np.abs(p)])
        return self._from_cycles(p)

    def power(self, p: int) -> np.ndarray:
        return self.indices([p])[0]

    def matrix(self, p: int = 1) -> np.ndarray:
        """Dense ``P_B^p`` with ``P[i, j] = 1`` iff ``B^p(i) = j``."""
        d = self.dim
        m = np.zeros((d, d))
        m[np.arange(d), self.power(p)] = 1.0
        return m

    def inverse(self) -> "RpeConfig":
        return RpeConfig(np.argsort(self.permutation), decay=1.0 / self.decay, max_position=self.max_position)


@dataclass(frozen=True, eq=False)
class AttentionConfig:
    num_heads: int
    head_dim: int
    variant: Variant = Variant.LINEARIZED_RPE
    kernel: Kernel = Kernel.ELU_PLUS_ONE
    rpe: RpeConfig | None = None
    decay: float = 1.0
    shared_permutation: bool = False
    seed: int = 0
    max_position: int = 2048
    head_rpes: tuple[RpeConfig, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise ValueError("num_heads and head_dim must be positive")
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "kernel", Kernel(self.kernel))
        rpes: tuple[RpeConfig, ...] = ()
        if self.variant is Variant.LINEARIZED_RPE:
            if self.rpe is not None:
                if self.rpe.dim != self.head_dim:
                    raise DimensionError(f"RPE permutation of size {self.rpe.dim} for head_dim {self.head_dim}")
                rpes = (self.rpe,) * self.num_heads
            elif self.shared_permutation:
                shared = RpeConfig.random(self.head_dim, self.seed, self.decay, self.max_position)
                rpes = (shared,) * self.num_heads
            else:
                rpes = tuple(RpeConfig.random(self.head_dim, self.seed + h, self.decay, self.max_position)
                             for h in range(self.num_heads))
        object.__setattr__(self, "head_rpes", rpes)

    @property
    def hidden(self) -> int:
        return self.num_heads * self.head_dim

    def replace_variant(self, variant: Variant) -> "AttentionConfig":
        return AttentionConfig(self.num_heads, self.head_dim, variant, self.kernel, self.rpe,
                               self.decay, self.shared_permutation, self.seed, self.max_position)


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(f"attention operands must be 2-D, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"{k.shape[0]} keys but {v.shape[0]} values")


def softmax_attention(q, k, v, scale: float | None = None) -> Tensor:
    """``softmax(q k^T * scale) v`` with ``scale = 1/sqrt(d)`` by default."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    weights = ops.softmax(ops.mul(ops.matmul(q, ops.transpose(k)), scale), axis=-1)
    return ops.matmul(weights, v)


def linearized_attention(q, k, v, kernel=Kernel.ELU_PLUS_ONE) -> Tensor:
    """Kernel attention through the factored form.

    Pass ``kernel=None`` when ``q`` and ``k`` are already feature-mapped
    (for example after :func:`apply_rpe`); they must then be positive.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    phi = _kernel_fn(kernel)
    fq, fk = (phi(q), phi(k)) if phi is not None else (q, k)
    summary = ops.matmul(ops.transpose(fk), v)       # [d, d_v]
    normalizer = ops.sum_(fk, axis=0)                # [d]
    num = ops.matmul(fq, summary)                    # [Lq, d_v]
    den = ops.matmul(fq, normalizer)                 # [Lq]
    return ops.div(num, ops.reshape(den, (q.shape[0], 1)))


def _elu_plus_one_scalar(x: float) -> float:
    return x + 1.0 if x > 0 else math.exp(x)


def _oracle_features(x: np.ndarray, kernel) -> np.ndarray:
    if kernel is None:
        return np.array(x, dtype=np.float64)
    Kernel(kernel)
    out = np.empty_like(x, dtype=np.float64)
    for idx, val in np.ndenumerate(x):
        out[idx] = _elu_plus_one_scalar(float(val))
    return out


def kernel_attention_weights(q, k, kernel=Kernel.ELU_PLUS_ONE) -> np.ndarray:
    """Normalized similarity weights ``[Lq, Lk]`` from the double-loop definition."""
    qd = _oracle_features(as_tensor(q).data, kernel)
    kd = _oracle_features(as_tensor(k).data, kernel)
    w = np.empty((qd.shape[0], kd.shape[0]))
    for i in range(qd.shape[0]):
        for j in range(kd.shape[0]):
            w[i, j] = float(np.dot(qd[i], kd[j]))
        total = w[i].sum()
        if not total > 0:
            raise ContractError(f"non-positive similarity mass for query {i}")
        w[i] /= total
    return w


def kernel_attention_oracle(q, k, v, kernel=Kernel.ELU_PLUS_ONE) -> Tensor:
    """Reference kernel attention: every query visits every key, O(Lq*Lk)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    qd = _oracle_features(q.data, kernel)
    kd = _oracle_features(k.data, kernel)
    vd = v.data
    out = np.empty((qd.shape[0], vd.shape[1]))
    for i in range(qd.shape[0]):
        num = np.zeros(vd.shape[1])
        den = 0.0
        for j in range(kd.shape[0]):
            sim = float(np.dot(qd[i], kd[j]))
            num += sim * vd[j]
            den += sim
        if den == 0.0:
            raise ContractError(f"zero normalizer for query {i}")
        out[i] = num / den
    return Tensor(out)


def apply_rpe(x, positions: Sequence[int], rpe: RpeConfig, role: Role) -> Tensor:
    """Rotate kernel-mapped rows by position-indexed permutation powers.

    Row at position ``p`` becomes ``r^p P_B^p row`` for queries and
    ``r^-p P_B^p row`` for keys.
    """
    x = as_tensor(x)
    positions = np.asarray(positions, dtype=np.intp)
    if x.ndim != 2 or positions.shape != (x.shape[0],):
        raise DimensionError(f"apply_rpe: {positions.size} positions for rows of {x.shape}")
    if x.shape[1] != rpe.dim:
        raise DimensionError(f"apply_rpe: feature width {x.shape[1]} vs permutation size {rpe.dim}")
    out = ops.take_along_last(x, rpe.indices(positions))
    if rpe.decay != 1.0:
        sign = 1.0 if Role(role) is Role.QUERY else -1.0
        with np.errstate(over="ignore", under="ignore"):
            factors = np.power(rpe.decay, sign * positions.astype(np.float64))
        if not np.all(np.isfinite(factors)) or np.any(factors == 0.0):
            raise ContractError("position decay factor overflowed; reduce positions or use decay=1")
        out = ops.mul(out, factors[:, None])
    return out


def rpe_similarity(q_feat: np.ndarray, k_feat: np.ndarray, i: int, j: int, rpe: RpeConfig) -> float:
    """``sim_p`` for a single (query at ``i``, key at ``j``) pair of feature rows."""
    qi = apply_rpe(Tensor(np.atleast_2d(q_feat)), [i], rpe, Role.QUERY).data[0]
    kj = apply_rpe(Tensor(np.atleast_2d(k_feat)), [j], rpe, Role.KEY).data[0]
    return float(qi @ kj)


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def named(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def head_attention(q: Tensor, k: Tensor, v: Tensor, config: AttentionConfig, head: int,
                   q_positions: np.ndarray, k_positions: np.ndarray) -> Tensor:
    if config.variant is Variant.SOFTMAX:
        return softmax_attention(q, k, v)
    if config.variant is Variant.LINEARIZED:
        return linearized_attention(q, k, v, config.kernel)
    phi = _kernel_fn(config.kernel)
    rpe = config.head_rpes[head]
    fq = apply_rpe(phi(q), q_positions, rpe, Role.QUERY)
    fk = apply_rpe(phi(k), k_positions, rpe, Role.KEY)
    return linearized_attention(fq, fk, v, kernel=None)


def multi_head_attention(x_q, x_kv, weights: AttentionWeights, config: AttentionConfig,
                         q_positions: Sequence[int] | None = None,
                         k_positions: Sequence[int] | None = None) -> Tensor:
    """Project, attend per head, concatenate heads, project out.

    Positions default to ``0..L-1`` on each side.
    """
    x_q, x_kv = as_tensor(x_q), as_tensor(x_kv)
    D = config.hidden
    if x_q.ndim != 2 or x_kv.ndim != 2 or x_q.shape[1] != D or x_kv.shape[1] != D:
        raise DimensionError(f"multi_head_attention: inputs {x_q.shape}, {x_kv.shape} for hidden {D}")
    qp = np.arange(x_q.shape[0]) if q_positions is None else np.asarray(q_positions)
    kp = np.arange(x_kv.shape[0]) if k_positions is None else np.asarray(k_positions)
    q = ops.matmul(x_q, weights.w_q)
    k = ops.matmul(x_kv, weights.w_k)
    v = ops.matmul(x_kv, weights.w_v)
    dh = config.head_dim
    heads = []
    for h in range(config.num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        heads.append(head_attention(q[:, cols], k[:, cols], v[:, cols], config, h, qp, kp))
    merged = heads[0] if len(heads) == 1 else ops.concat(heads, axis=1)
    return ops.matmul(merged, weights.w_o)
