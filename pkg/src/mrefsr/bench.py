"""Wall time and peak allocation of multi-reference inference versus reference stitching.

The multi-reference path matches every reference separately against the
LR image and fuses them by attention. The stitching baseline glues the
references side by side into one wide image and runs the same network
with that single reference. Peak allocation is measured with
:mod:`tracemalloc`, which counts numpy buffers, so numbers are
comparable across machines (they exclude interpreter overhead).
"""

import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np

from .align import match_offsets
from .metrics import downscale4
from .pipeline import RefGroupSample, forward_sr
from .synthetic import texture


@dataclass
class BenchRow:
    method: str  # "mam" or "stitch"
    n_refs: int
    median_s: float
    peak_bytes: int
    repeats: int

    def to_json(self):
        return asdict(self)


def bench_inputs(seed=0, lr_size=24, n_refs=5):
    rng = np.random.default_rng(seed)
    hr = texture(rng, 4 * lr_size, 4 * lr_size)
    refs = [texture(rng, 4 * lr_size, 4 * lr_size) for _ in range(n_refs)]
    return downscale4(hr), refs


def run_mam(model, lr, refs):
    offsets = [match_offsets(lr, r) for r in refs]
    return forward_sr(RefGroupSample(lr, refs, offsets=offsets), model)


def run_stitch(model, lr, refs):
    wide = np.concatenate(refs, axis=1)
    offsets = [match_offsets(lr, wide)]
    return forward_sr(RefGroupSample(lr, [wide], offsets=offsets), model)


def measure(fn, repeats):
    """``(median seconds, traced peak bytes)``.

    Timed calls run with tracing off (tracemalloc slows every allocation);
    one extra traced call gives the peak.
    """
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    tracemalloc.start()
    try:
        fn()
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return statistics.median(times), peak


def run_bench(model, n_list=(1, 2, 3, 4, 5), repeats=5, seed=0, lr_size=24, stitch=True, log_fn=None):
    """One ``mam`` row per N, plus a ``stitch`` row per N > 1 when requested."""
    lr, refs = bench_inputs(seed, lr_size, max(n_list))
    run_mam(model, lr, refs[:1])  # warm-up
    rows = []
    for n in n_list:
        t, peak = measure(lambda: run_mam(model, lr, refs[:n]), repeats)
        rows.append(BenchRow("mam", n, t, peak, repeats))
        if log_fn:
            log_fn(rows[-1].to_json())
        if stitch and n > 1:
            t, peak = measure(lambda: run_stitch(model, lr, refs[:n]), repeats)
            rows.append(BenchRow("stitch", n, t, peak, repeats))
            if log_fn:
                log_fn(rows[-1].to_json())
    return rows
