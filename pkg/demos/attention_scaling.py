"""
Latency against sequence length
===============================

A shortened version of ``ctxspeech bench``: median time per call for each
attention variant, single-threaded, and the fitted log-log slope.
"""
from ctxspeech.bench import BenchSpec, run_bench

report = run_bench(BenchSpec(lengths=(256, 512, 1024, 2048), repetitions=5, warmup=1), progress=print)
print()
print(report.format())
