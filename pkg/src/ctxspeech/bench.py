"""Attention latency vs sequence length.

Times the attention kernels alone on random inputs and fits the log-log
slope of median latency against length: about 1 for the linear variants and
about 2 for softmax.
"""
from __future__ import annotations

import csv
import math
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import RpeConfig, Role, Variant, apply_rpe, linearized_attention, softmax_attention
from .ops import elu_plus_one
from .tensor import Tensor

CSV_HEADER = ["variant", "length", "median_ms", "ms_per_element", "peak_bytes_est"]
DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096, 8192)


@dataclass(frozen=True)
class BenchSpec:
    lengths: tuple[int, ...] = DEFAULT_LENGTHS
    variants: tuple[Variant, ...] = (Variant.SOFTMAX, Variant.LINEARIZED, Variant.LINEARIZED_RPE)
    d: int = 64
    heads: int = 1
    repetitions: int = 10
    warmup: int = 3
    seed: int = 42
    threads: int = 1
    memory_cap_bytes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(int(n) for n in self.lengths))
        object.__setattr__(self, "variants", tuple(Variant(v) for v in self.variants))
        if not self.lengths or any(n < 1 for n in self.lengths):
            raise ValueError("lengths must be positive")
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ValueError(f"lengths must be strictly increasing, got {self.lengths}")
        if self.repetitions < 3:
            raise ValueError(f"repetitions must be >= 3, got {self.repetitions}")
        if self.warmup < 0 or self.d < 1 or self.heads < 1 or self.threads < 1:
            raise ValueError("warmup must be >= 0; d, heads and threads must be >= 1")


@dataclass
class BenchRow:
    variant: Variant
    length: int
    median_ms: float
    peak_bytes_est: int
    oom: bool = False

    @property
    def ms_per_element(self) -> float:
        return self.median_ms / self.length

    def csv_row(self) -> list:
        if self.oom:
            return [self.variant.value, self.length, "oom", "oom", self.peak_bytes_est]
        return [self.variant.value, self.length, f"{self.median_ms:.6f}", f"{self.ms_per_element:.9f}",
                self.peak_bytes_est]


@dataclass
class BenchReport:
    spec: BenchSpec
    rows: list[BenchRow] = field(default_factory=list)
    slopes: dict[Variant, float] = field(default_factory=dict)
    total_seconds: float = 0.0

    def row(self, variant: Variant, length: int) -> BenchRow:
        for r in self.rows:
            if r.variant is Variant(variant) and r.length == length:
                return r
        raise KeyError((variant, length))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow(r.csv_row())

    def format(self) -> str:
        lines = [f"{'variant':<16}{'length':>8}{'median_ms':>14}{'ms/elem':>14}{'peak_MB':>10}"]
        for r in self.rows:
            med = "oom" if r.oom else f"{r.median_ms:.3f}"
            per = "oom" if r.oom else f"{r.ms_per_element:.3e}"
            lines.append(f"{r.variant.value:<16}{r.length:>8}{med:>14}{per:>14}{r.peak_bytes_est / 2**20:>10.1f}")
        for v, s in self.slopes.items():
            lines.append(f"slope[{v.value}] = {s:.3f}")
        if self.spec.threads > 1:
            lines.append(f"(throughput mode: {self.spec.threads} threads)")
        return "\n".join(lines)


def fit_slope(lengths: Sequence[float], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(length); needs >= 4 points."""
    if len(lengths) < 4:
        return math.nan
    slope, _ = np.polyfit(np.log(lengths), np.log(times), 1)
    return float(slope)


def softmax_bytes_estimate(length: int, d: int, heads: int) -> int:
    # Score matrix plus the normalized copy, per head, float64.
    return heads * (2 * length * length + 4 * length * d) * 8


def _make_call(variant: Variant, q: np.ndarray, k: np.ndarray, v: np.ndarray, spec: BenchSpec,
               rpe: list[RpeConfig]) -> Callable[[], None]:
    d = spec.d
    L = q.shape[0]
    positions = np.arange(L)
    heads = [(Tensor._wrap(q[:, h * d:(h + 1) * d]), Tensor._wrap(k[:, h * d:(h + 1) * d]),
              Tensor._wrap(v[:, h * d:(h + 1) * d])) for h in range(spec.heads)]

    if variant is Variant.SOFTMAX:
        def call():
            for qh, kh, vh in heads:
                softmax_attention(qh, kh, vh)
    elif variant is Variant.LINEARIZED:
        def call():
            for qh, kh, vh in heads:
                linearized_attention(qh, kh, vh)
    else:
        def call():
            for h, (qh, kh, vh) in enumerate(heads):
                fq = apply_rpe(elu_plus_one(qh), positions, rpe[h], Role.QUERY)
                fk = apply_rpe(elu_plus_one(kh), positions, rpe[h], Role.KEY)
                linearized_attention(fq, fk, vh, kernel=None)
    return call


def _measure(call: Callable[[], None], spec: BenchSpec) -> tuple[float, int]:
    for _ in range(spec.warmup):
        call()
    times = []
    for _ in range(spec.repetitions):
        t0 = time.perf_counter()
        call()
        times.append(time.perf_counter() - t0)
    tracemalloc.start()
    try:
        call()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return statistics.median(times) * 1e3, peak


def run_bench(spec: BenchSpec = BenchSpec(), progress: Callable[[str], None] | None = None) -> BenchReport:
    """Time each (variant, length) pair; softmax past ``memory_cap_bytes`` is logged as OOM."""
    report = BenchReport(spec)
    t_start = time.perf_counter()
    width = spec.d * spec.heads
    rpe = [RpeConfig.random(spec.d, spec.seed + h, max_position=max(spec.lengths)) for h in range(spec.heads)]
    with threadpool_limits(limits=spec.threads):
        for variant in spec.variants:
            for L in spec.lengths:
                rng = np.random.default_rng([spec.seed, L])
                q, k, v = (rng.standard_normal((L, width)) for _ in range(3))
                est = softmax_bytes_estimate(L, spec.d, spec.heads) if variant is Variant.SOFTMAX else 0
                if spec.memory_cap_bytes is not None and est > spec.memory_cap_bytes:
                    report.rows.append(BenchRow(variant, L, math.nan, est, oom=True))
                    continue
                try:
                    median_ms, peak = _measure(_make_call(variant, q, k, v, spec, rpe), spec)
                except MemoryError:
                    report.rows.append(BenchRow(variant, L, math.nan, est, oom=True))
                    continue
                report.rows.append(BenchRow(variant, L, median_ms, peak))
                if progress:
                    progress(f"{variant.value} L={L}: {median_ms:.3f} ms")
            pts = [(r.length, r.median_ms) for r in report.rows if r.variant is variant and not r.oom]
            report.slopes[variant] = fit_slope([p[0] for p in pts], [p[1] for p in pts])
    report.total_seconds = time.perf_counter() - t_start
    return report
