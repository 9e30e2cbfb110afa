"""Timing and oracle comparison for the sequential and chunked scans."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .s6 import scan_chunked, scan_sequential

TOLERANCE = {np.float32: 1e-5, np.float64: 1e-10}
DEFAULT_SHAPES = ((1, 64, 32, 16), (4, 192, 32, 16), (2, 1024, 32, 16), (1, 4096, 32, 16))
DEFAULT_CHUNKS = (1, 16, 64)


@dataclass
class BenchRow:
    B: int
    L: int
    D: int
    N: int
    chunk: int
    sequential_ms: float
    chunked_ms: float
    speedup: float
    elements_per_s: float
    max_rel_err: float
    vs_sequential: float  # same-precision distance to the sequential kernel; 0 means bit-identical


def scan_rel_error(out: np.ndarray, ref: np.ndarray) -> float:
    """max|out - ref| / max|ref| over the whole state trajectory."""
    denom = float(np.abs(ref).max())
    return float(np.abs(out.astype(np.float64) - ref).max() / denom) if denom > 0 else float(np.abs(out).max())


def random_scan_inputs(rng: np.random.Generator, B: int, L: int, D: int, N: int, dtype=np.float32):
    """Discretized (a, b) pairs, time-major [L, B, D, N], with a in (0, 1]."""
    delta = np.log1p(np.exp(rng.normal(-2.0, 1.5, size=(L, B, D, 1))))
    A = -np.arange(1, N + 1, dtype=np.float64)
    a = np.exp(delta * A)
    b = rng.normal(size=(L, B, D, N)) * delta
    return a.astype(dtype), b.astype(dtype)


def _median_ms(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def scan_benchmark(shapes=DEFAULT_SHAPES, chunks=DEFAULT_CHUNKS, reps: int = 3, dtype=np.float32,
                   seed: int = 0) -> list[BenchRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for B, L, D, N in shapes:
        a, b = random_scan_inputs(rng, B, L, D, N, dtype)
        # float64 sequential recurrence is the oracle for either precision
        ref = scan_sequential(a.astype(np.float64), b.astype(np.float64))
        seq_out = scan_sequential(a, b)
        seq_ms = _median_ms(lambda: scan_sequential(a, b), reps)
        for c in chunks:
            out = scan_chunked(a, b, c)
            err = scan_rel_error(out, ref)
            ms = _median_ms(lambda: scan_chunked(a, b, c), reps)
            rows.append(BenchRow(B, L, D, N, c, round(seq_ms, 4), round(ms, 4), round(seq_ms / ms, 4),
                                 float(B * L * D * N / (ms / 1e3)), err, scan_rel_error(out, seq_out)))
    return rows


def table(rows: list[BenchRow], with_timings: bool = True) -> str:
    keys = list(asdict(rows[0])) if with_timings else ["B", "L", "D", "N", "chunk", "max_rel_err", "vs_sequential"]
    fmt = {"elements_per_s": "{:.3e}", "max_rel_err": "{:.2e}", "vs_sequential": "{:.2e}"}
    cells = [[fmt.get(k, "{}").format(getattr(r, k)) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    line = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))  # noqa: E731
    return "\n".join([line(keys), line(["-" * w for w in widths])] + [line(c) for c in cells])
