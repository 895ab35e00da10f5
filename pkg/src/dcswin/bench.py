"""Timing harnesses: attention scaling and compiled-vs-numpy kernel comparison."""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .attention import (BRUTE_FORCE_MAX_N, QKVProjection, brute_force_linear_attention,
                        linear_attention, normalize_rows)
from .tensor import Tensor, no_grad, ops

DEFAULT_SIZES = (1024, 4096, 16384, 65536)
BENCH_CHANNELS = 256

# The rows that feed the slope fits must satisfy these bands.
LINEAR_SLOPE_BAND = (0.8, 1.3)
QUADRATIC_SLOPE_BAND = (1.7, 2.3)


def best_time(fn, repeats=3, min_time=0.05):
    """Fastest of ``repeats`` timings, each looping until ``min_time`` elapses."""
    best = np.inf
    for _ in range(repeats):
        n, start = 0, time.perf_counter()
        while True:
            fn()
            n += 1
            elapsed = time.perf_counter() - start
            if elapsed >= min_time:
                break
        best = min(best, elapsed / n)
    return best


def peak_memory(fn):
    """Peak traced allocation (bytes) while ``fn`` runs; numpy buffers are traced."""
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def largest_array(fn):
    """Element count of the largest array any tensor op creates while ``fn`` runs."""
    seen = [0]
    original = ops.make_result

    def spy(data, parents, backward):
        seen[0] = max(seen[0], int(np.size(data)))
        return original(data, parents, backward)

    ops.make_result = spy
    try:
        fn()
    finally:
        ops.make_result = original
    return seen[0]


def loglog_slope(sizes, times):
    sizes, times = np.asarray(sizes, float), np.asarray(times, float)
    ok = np.isfinite(times)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(sizes[ok]), np.log(times[ok]), 1)[0])


def _grid(n):
    """An (h, w) with h * w == n, as square as possible."""
    h = int(np.sqrt(n))
    while n % h:
        h -= 1
    return h, n // h


@dataclass
class AttentionRow:
    n: int
    t_linear: float
    t_quadratic: float
    peak_linear: int
    largest_linear: int


@dataclass
class AttentionBench:
    rows: list
    channels: int
    slope_linear: float
    slope_quadratic: float

    def tsv(self):
        lines = ["N\tt_linear\tt_quadratic\tpeak_linear_bytes\tlargest_linear_array"]
        for r in self.rows:
            tq = "nan" if np.isnan(r.t_quadratic) else f"{r.t_quadratic:.6e}"
            lines.append(f"{r.n}\t{r.t_linear:.6e}\t{tq}\t{r.peak_linear}\t{r.largest_linear}")
        lines.append(f"# slope_linear\t{self.slope_linear:.4f}")
        lines.append(f"# slope_quadratic\t{self.slope_quadratic:.4f}")
        lines.append(f"# slope_peak_memory\t{self.slope_memory:.4f}")
        return "\n".join(lines) + "\n"

    @property
    def slope_memory(self):
        return loglog_slope([r.n for r in self.rows], [r.peak_linear for r in self.rows])

    def quadratic_bytes(self, n):
        return n * n * np.dtype(np.float32).itemsize


def bench_attention(sizes=DEFAULT_SIZES, channels=BENCH_CHANNELS, seed=0, force=False,
                    repeats=3):
    """Time the factorized attention core against the N x N oracle.

    Queries, keys and values come from the spatial-attention projection
    (Dk = C/8, Dv = C) and are computed once per size; both paths receive the
    same arrays, so the timings isolate the attention itself. The oracle only
    runs for ``N <= BRUTE_FORCE_MAX_N`` unless ``force`` is set; skipped
    entries are NaN and do not enter the slope fit.
    """
    rng = np.random.default_rng(seed)
    proj = QKVProjection(channels, rng)
    rows = []
    for n in sorted(sizes):
        h, w = _grid(n)
        x = Tensor(rng.standard_normal((1, channels, h, w)).astype(np.float32))
        with no_grad():
            q, k, v = (t.detach() for t in proj(x))

        def linear():
            with no_grad():
                linear_attention(q, k, v)

        t_lin = best_time(linear, repeats)
        peak = peak_memory(linear)
        t_quad = float("nan")
        if n <= BRUTE_FORCE_MAX_N or force:
            def quadratic():
                brute_force_linear_attention(normalize_rows(q.data), normalize_rows(k.data),
                                             v.data, force)

            t_quad = best_time(quadratic, repeats)
        rows.append(AttentionRow(n, t_lin, t_quad, peak, largest_array(linear)))
    ns = [r.n for r in rows]
    return AttentionBench(rows, channels, loglog_slope(ns, [r.t_linear for r in rows]),
                          loglog_slope(ns, [r.t_quadratic for r in rows]))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

KERNEL_CASES = (
    # (B, C, H, W, k, stride, padding, dilation)
    (4, 32, 16, 16, 3, 1, 1, 1),
    (4, 64, 32, 32, 3, 1, 1, 1),
    (2, 128, 32, 32, 3, 2, 1, 1),
    (1, 64, 64, 64, 3, 1, 6, 6),
)


def bench_kernels(cases=KERNEL_CASES, repeats=3, seed=0):
    """Rows of (case, backend, t_im2col, t_col2im) for every available backend."""
    rng = np.random.default_rng(seed)
    rows = []
    for case in cases:
        B, C, H, W, k, s, p, d = case
        x = rng.standard_normal((B, C, H, W)).astype(np.float32)
        for name, (im2col, col2im) in _kernels.backends().items():
            cols = im2col(x, k, k, s, p, d)
            t1 = best_time(lambda: im2col(x, k, k, s, p, d), repeats)
            t2 = best_time(lambda: col2im(cols, C, H, W, k, k, s, p, d), repeats)
            rows.append((case, name, t1, t2))
    return rows


def kernels_tsv(rows):
    lines = ["B\tC\tH\tW\tk\tstride\tpadding\tdilation\tbackend\tt_im2col\tt_col2im"]
    for case, name, t1, t2 in rows:
        lines.append("\t".join(map(str, case)) + f"\t{name}\t{t1:.6e}\t{t2:.6e}")
    return "\n".join(lines) + "\n"
