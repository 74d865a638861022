"""Matrix multiplication on compressed 2:4 storage, MAC accounting, benchmarks.

The sparse kernel touches only the two retained values of every 4-block, so it
executes exactly half the multiply-accumulates of the dense product.  The
benchmark compares it against a dense kernel of identical loop structure (the
controlled way to measure the arithmetic saving in software) and also reports
the platform BLAS dense product as a reference line; wall-clock ratios are
reported, never asserted to equal the hardware figure of 2.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from threadpoolctl import threadpool_limits

from .patterns import Compressed24, NmConfig, compress, enumerate_patterns, mask_from_indices

__all__ = [
    "FlopReport",
    "BenchEntry",
    "BenchReport",
    "spmm",
    "spmm_counted",
    "flop_count",
    "bench_compare",
]


@njit(cache=True, fastmath=True)
def _spmm_kernel(values, cols, x, out):  # pragma: no cover - compiled
    rows, nnz = values.shape
    xc = x.shape[1]
    for r in range(rows):
        acc = out[r]
        for t in range(nnz):  # ascending block order: fixed summation order
            v = values[r, t]
            xrow = x[cols[r, t]]
            for j in range(xc):
                acc[j] += v * xrow[j]
    return out


@njit(cache=True, fastmath=True, parallel=True)
def _spmm_kernel_par(values, cols, x, out):  # pragma: no cover - compiled
    rows, nnz = values.shape
    xc = x.shape[1]
    for r in prange(rows):
        acc = out[r]
        for t in range(nnz):
            v = values[r, t]
            xrow = x[cols[r, t]]
            for j in range(xc):
                acc[j] += v * xrow[j]
    return out


@njit(cache=True, fastmath=True)
def _dense_kernel(a, x, out):  # pragma: no cover - compiled
    rows, k = a.shape
    xc = x.shape[1]
    for r in range(rows):
        acc = out[r]
        for t in range(k):
            v = a[r, t]
            xrow = x[t]
            for j in range(xc):
                acc[j] += v * xrow[j]
    return out


@njit(cache=True, fastmath=True, parallel=True)
def _dense_kernel_par(a, x, out):  # pragma: no cover - compiled
    rows, k = a.shape
    xc = x.shape[1]
    for r in prange(rows):
        acc = out[r]
        for t in range(k):
            v = a[r, t]
            xrow = x[t]
            for j in range(xc):
                acc[j] += v * xrow[j]
    return out


def _column_indices(a: Compressed24) -> np.ndarray:
    base = (np.arange(a.blocks_per_row, dtype=np.int64) * 4).repeat(2)
    return base[None, :] + a.indices.astype(np.int64)


def spmm(a: Compressed24, x: np.ndarray, parallel: bool = False) -> np.ndarray:
    """Multiply compressed 2:4 storage by a dense matrix.

    Equals decompress(a) @ x while performing 2 MACs per 4-block per output
    column.  Per-row summation runs in ascending block order, so the result is
    reproducible bit-for-bit single-threaded; row-parallel execution keeps the
    per-element order and is bitwise identical.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"x must be 2-D, got shape {x.shape}")
    if x.shape[0] != a.cols:
        raise ValueError(f"dimension mismatch: a.cols={a.cols}, x.rows={x.shape[0]}")
    out = np.zeros((a.rows, x.shape[1]), dtype=np.float64)
    if a.rows == 0 or a.cols == 0 or x.shape[1] == 0:
        return out
    values = np.ascontiguousarray(a.values)
    cols = np.ascontiguousarray(_column_indices(a))
    kern = _spmm_kernel_par if parallel else _spmm_kernel
    return kern(values, cols, x, out)


def spmm_counted(a: Compressed24, x: np.ndarray) -> tuple[np.ndarray, int]:
    """Instrumented reference spmm: returns the product and the exact number of
    multiply-accumulates executed.  Meant for small shapes."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != a.cols:
        raise ValueError(f"dimension mismatch: a.cols={a.cols}, x shape {x.shape}")
    out = np.zeros((a.rows, x.shape[1]), dtype=np.float64)
    cols = _column_indices(a)
    macs = 0
    for r in range(a.rows):
        for t in range(a.values.shape[1]):
            out[r] += a.values[r, t] * x[cols[r, t]]
            macs += x.shape[1]
    return out, macs


@dataclass(frozen=True)
class FlopReport:
    """Arithmetic and byte model of a (rows x cols) @ (cols x l) product."""

    dense_macs: int
    sparse_macs: int
    ratio: float
    bytes_dense: int
    bytes_compressed: int


def flop_count(rows: int, cols: int, l: int, config: NmConfig = NmConfig()) -> FlopReport:
    """Exact MAC and byte counts for dense vs N:M-sparse execution.

    Values are counted at full f64 width; the compressed form adds 2 index
    bits per retained value (packed).
    """
    if rows <= 0 or cols <= 0 or l <= 0:
        raise ValueError("dimensions must be positive")
    if cols % config.block_len != 0:
        raise ValueError(
            f"cols {cols} not a multiple of block_len {config.block_len}"
        )
    dense = rows * cols * l
    retained = rows * cols * config.kept // config.block_len
    sparse = retained * l
    return FlopReport(
        dense_macs=dense,
        sparse_macs=sparse,
        ratio=config.block_len / config.kept,
        bytes_dense=rows * cols * 8,
        bytes_compressed=retained * 8 + (retained * 2 + 7) // 8,
    )


@dataclass(frozen=True)
class BenchEntry:
    size: int
    mode: str  # "dense" | "sparse" | "blas"
    times_ns: tuple[int, ...]
    macs: int

    @property
    def median_ns(self) -> int:
        return int(np.median(self.times_ns))

    @property
    def min_ns(self) -> int:
        return int(min(self.times_ns))

    @property
    def gmacs_per_s(self) -> float:
        return self.macs / self.median_ns if self.median_ns else float("nan")


@dataclass(frozen=True)
class BenchReport:
    entries: tuple[BenchEntry, ...]
    reps: int
    seed: int
    pinned_single_thread: bool

    def entry(self, size: int, mode: str) -> BenchEntry:
        for e in self.entries:
            if e.size == size and e.mode == mode:
                return e
        raise KeyError(f"no entry for size={size} mode={mode}")

    def text_table(self) -> str:
        lines = [
            f"{'size':>6}  {'mode':<7}  {'median_ms':>10}  {'min_ms':>10}  "
            f"{'GMAC/s':>8}  {'macs':>14}",
        ]
        for e in self.entries:
            lines.append(
                f"{e.size:>6}  {e.mode:<7}  {e.median_ns / 1e6:>10.3f}  "
                f"{e.min_ns / 1e6:>10.3f}  {e.gmacs_per_s:>8.2f}  {e.macs:>14}"
            )
        sizes = sorted({e.size for e in self.entries})
        for s in sizes:
            d = self.entry(s, "dense").median_ns
            sp = self.entry(s, "sparse").median_ns
            lines.append(f"# size {s}: sparse/dense wall-time speedup {d / sp:.2f}x")
        return "\n".join(lines)

    def records(self) -> list[str]:
        """Machine-readable lines, one measurement per line."""
        out = ["size\tmode\trep\tnanoseconds"]
        for e in self.entries:
            for rep, t in enumerate(e.times_ns):
                out.append(f"{e.size}\t{e.mode}\t{rep}\t{t}")
        return out


def _random_instance(size: int, seed: int):
    rng = np.random.Generator(np.random.Philox(key=seed))
    w = rng.standard_normal((size, size))
    x = rng.standard_normal((size, size))
    patterns = enumerate_patterns(NmConfig())
    idx = rng.integers(0, patterns.pattern_count, size=size * size // 4)
    mask = mask_from_indices(idx, patterns, size, size)
    return w * mask.bits, x, mask


def bench_compare(
    sizes: list[int],
    reps: int,
    rng_seed: int = 0,
    pin_single_thread: bool = True,
    parallel: bool = False,
    warmup: int = 2,
) -> BenchReport:
    """Time dense vs structured-sparse matmul on identical random data.

    Three modes per size: the like-for-like dense kernel, the 2:4 sparse
    kernel, and the platform BLAS product as a reference.  Correctness of all
    paths is cross-checked before any timing; warm-up iterations (which also
    absorb JIT compilation) are excluded.
    """
    if not sizes:
        raise ValueError("sizes must be non-empty")
    if reps < 5:
        raise ValueError(f"reps must be at least 5, got {reps}")
    entries: list[BenchEntry] = []
    for size in sizes:
        if size % 4 != 0:
            raise ValueError(f"benchmark sizes must be multiples of 4, got {size}")
        sub_seed = int(np.random.SeedSequence([rng_seed, size]).generate_state(1, np.uint64)[0])
        wm, x, mask = _random_instance(size, sub_seed)
        comp = compress(wm, mask)
        report = flop_count(size, size, size)

        values = np.ascontiguousarray(comp.values)
        cols = np.ascontiguousarray(_column_indices(comp))
        skern = _spmm_kernel_par if parallel else _spmm_kernel
        dkern = _dense_kernel_par if parallel else _dense_kernel

        def run_sparse():
            return skern(values, cols, x, np.zeros((size, size)))

        def run_dense():
            return dkern(wm, x, np.zeros((size, size)))

        def run_blas():
            return wm @ x

        # correctness cross-check before timing
        ref = run_blas()
        for f in (run_sparse, run_dense):
            err = np.abs(f() - ref).max()
            scale = max(np.abs(ref).max(), 1.0)
            if err > 1e-10 * scale:
                raise AssertionError(f"kernel disagrees with BLAS at size {size}: {err}")

        limit = 1 if pin_single_thread else None
        for mode, fn, macs in (
            ("dense", run_dense, report.dense_macs),
            ("sparse", run_sparse, report.sparse_macs),
            ("blas", run_blas, report.dense_macs),
        ):
            with threadpool_limits(limits=limit):
                for _ in range(warmup):
                    fn()
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter_ns()
                    fn()
                    times.append(time.perf_counter_ns() - t0)
            entries.append(BenchEntry(size, mode, tuple(times), macs))
    return BenchReport(tuple(entries), reps, rng_seed, pin_single_thread)
