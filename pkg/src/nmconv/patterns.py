"""N:M sparsity patterns, mask validation, and compressed 2:4 storage.

A block of ``block_len`` contiguous weights (row-major within each matrix row)
keeps exactly ``kept`` non-zeros.  The admissible keep patterns of one block
are enumerated as the columns of a pattern matrix; a whole-layer mask is a
{0,1} matrix whose every block is one of those columns.  For the 2:4 case the
masked matrix additionally has a compressed form storing only the retained
values plus one 2-bit position index each.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

__all__ = [
    "NmConfig",
    "PatternMatrix",
    "BitMask",
    "ValidationReport",
    "Compressed24",
    "pattern_count",
    "enumerate_patterns",
    "validate_mask",
    "compress",
    "decompress",
    "mask_from_indices",
    "indices_from_mask",
    "pack_indices",
    "unpack_indices",
]


@dataclass(frozen=True)
class NmConfig:
    """Block structure: ``kept`` of every ``block_len`` contiguous weights survive."""

    block_len: int = 4
    kept: int = 2

    def __post_init__(self) -> None:
        if not isinstance(self.block_len, int) or not isinstance(self.kept, int):
            raise TypeError("block_len and kept must be integers")
        if self.block_len < 2 or self.block_len > 8:
            raise ValueError(f"block_len must be in [2, 8], got {self.block_len}")
        if not 0 < self.kept < self.block_len:
            raise ValueError(
                f"kept must satisfy 0 < kept < block_len, got kept={self.kept}, "
                f"block_len={self.block_len}"
            )

    @property
    def is_two_four(self) -> bool:
        return self.block_len == 4 and self.kept == 2


def pattern_count(config: NmConfig) -> int:
    """Number of distinct keep patterns for one block: C(block_len, kept)."""
    return math.comb(config.block_len, config.kept)


@dataclass(frozen=True)
class PatternMatrix:
    """All keep patterns of one block as kept-hot columns, in lexicographic
    order of the kept position sets ({0,1} < {0,2} < ... for 2:4)."""

    block_len: int
    columns: np.ndarray  # (block_len, n) uint8

    @property
    def pattern_count(self) -> int:
        return self.columns.shape[1]

    @property
    def kept(self) -> int:
        return int(self.columns[:, 0].sum())

    def kept_positions(self, index: int) -> tuple[int, ...]:
        """In-block positions retained by pattern ``index``, ascending."""
        return tuple(int(p) for p in np.flatnonzero(self.columns[:, index]))

    def index_of(self, block_bits: np.ndarray) -> int:
        """Pattern index whose column equals ``block_bits``; raises if none."""
        bits = np.asarray(block_bits, dtype=np.uint8).ravel()
        if bits.shape[0] != self.block_len:
            raise ValueError(f"block has {bits.shape[0]} entries, expected {self.block_len}")
        hits = np.flatnonzero((self.columns == bits[:, None]).all(axis=0))
        if hits.size == 0:
            raise ValueError(f"block {bits.tolist()} is not a valid keep pattern")
        return int(hits[0])


def enumerate_patterns(config: NmConfig) -> PatternMatrix:
    """Enumerate all C(block_len, kept) keep patterns as columns."""
    n = pattern_count(config)
    cols = np.zeros((config.block_len, n), dtype=np.uint8)
    for i, kept in enumerate(combinations(range(config.block_len), config.kept)):
        cols[list(kept), i] = 1
    return PatternMatrix(config.block_len, cols)


@dataclass(frozen=True)
class BitMask:
    """A {0,1} mask over a weight matrix whose width is a whole number of blocks.

    Construction checks shape and bit-ness only; the per-block keep-count
    constraint is checked by :func:`validate_mask` so that violating masks can
    still be represented and reported on.
    """

    bits: np.ndarray  # (rows, cols) uint8
    config: NmConfig = NmConfig()

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        if bits.shape[1] % self.config.block_len != 0:
            raise ValueError(
                f"mask width {bits.shape[1]} is not a multiple of block_len "
                f"{self.config.block_len}"
            )
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @property
    def blocks_per_row(self) -> int:
        return self.cols // self.config.block_len

    def density(self) -> float:
        """Fraction of kept (non-zero) entries."""
        return float(self.bits.mean()) if self.bits.size else 0.0


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of an N:M constraint check; coordinates of the first bad block."""

    ok: bool
    row: int | None = None
    block: int | None = None
    popcount: int | None = None

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return (
            f"violation at block (row {self.row}, block {self.block}): "
            f"popcount {self.popcount}"
        )


def validate_mask(mask: BitMask) -> ValidationReport:
    """Check that every row-major block keeps exactly ``config.kept`` entries."""
    m, k = mask.config.block_len, mask.config.kept
    if mask.bits.size == 0:
        return ValidationReport(ok=True)
    counts = mask.bits.reshape(mask.rows, mask.blocks_per_row, m).sum(axis=2)
    bad = np.argwhere(counts != k)
    if bad.size == 0:
        return ValidationReport(ok=True)
    r, b = (int(v) for v in bad[0])
    return ValidationReport(ok=False, row=r, block=b, popcount=int(counts[r, b]))


@dataclass(frozen=True)
class Compressed24:
    """Retained values of a 2:4-masked matrix plus 2-bit in-block positions.

    ``values`` and ``indices`` are row-major over blocks: entry ``(r, 2*b+s)``
    is the s-th retained element of block ``b`` in row ``r``; the two indices
    of a block are strictly increasing.
    """

    rows: int
    cols: int
    values: np.ndarray  # (rows, cols // 2) float64
    indices: np.ndarray  # (rows, cols // 2) uint8, values in {0,1,2,3}
    config: NmConfig = NmConfig()

    def __post_init__(self) -> None:
        if not self.config.is_two_four:
            raise ValueError("Compressed24 requires the 2:4 configuration")
        if self.cols % 4 != 0:
            raise ValueError(f"cols must be a multiple of 4, got {self.cols}")
        expect = (self.rows, self.cols // 2)
        values = np.asarray(self.values, dtype=np.float64)
        indices = np.asarray(self.indices, dtype=np.uint8)
        if values.shape != expect or indices.shape != expect:
            raise ValueError(
                f"values/indices must have shape {expect}, got "
                f"{values.shape} / {indices.shape}"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "indices", indices)

    @property
    def blocks_per_row(self) -> int:
        return self.cols // 4


def compress(dense: np.ndarray, mask: BitMask) -> Compressed24:
    """Gather the mask-retained entries of ``dense`` into compressed 2:4 form."""
    dense = np.asarray(dense, dtype=np.float64)
    if dense.shape != (mask.rows, mask.cols):
        raise ValueError(
            f"dense shape {dense.shape} does not match mask {(mask.rows, mask.cols)}"
        )
    if not mask.config.is_two_four:
        raise ValueError("compress requires a 2:4 mask")
    report = validate_mask(mask)
    if not report.ok:
        raise ValueError(f"invalid mask: {report}")
    keep = mask.bits.astype(bool)
    half = mask.cols // 2
    values = dense[keep].reshape(mask.rows, half)
    indices = (np.nonzero(keep)[1] % 4).astype(np.uint8).reshape(mask.rows, half)
    return Compressed24(mask.rows, mask.cols, values, indices, mask.config)


def decompress(c: Compressed24) -> np.ndarray:
    """Expand compressed storage back to a dense matrix with zeros at pruned spots."""
    out = np.zeros((c.rows, c.cols), dtype=np.float64)
    if c.rows == 0 or c.cols == 0:
        return out
    idx = c.indices.reshape(c.rows, c.blocks_per_row, 2)
    if idx.max() > 3:
        raise ValueError("malformed index stream: index out of range [0, 3]")
    if not (idx[:, :, 1] > idx[:, :, 0]).all():
        raise ValueError("malformed index stream: indices not strictly increasing in block")
    block_base = np.arange(c.blocks_per_row, dtype=np.int64) * 4
    cols = (block_base[None, :, None] + idx).reshape(c.rows, c.cols // 2)
    rows = np.repeat(np.arange(c.rows), c.cols // 2).reshape(c.rows, c.cols // 2)
    out[rows, cols] = c.values
    return out


def mask_from_indices(
    indices: np.ndarray, patterns: PatternMatrix, rows: int, cols: int
) -> BitMask:
    """Assemble a BitMask from one pattern index per row-major block."""
    indices = np.asarray(indices, dtype=np.int64).ravel()
    m = patterns.block_len
    if cols % m != 0:
        raise ValueError(f"cols {cols} not a multiple of block_len {m}")
    blocks = rows * cols // m
    if indices.shape[0] != blocks:
        raise ValueError(f"expected {blocks} block indices, got {indices.shape[0]}")
    if indices.size and (indices.min() < 0 or indices.max() >= patterns.pattern_count):
        raise ValueError("pattern index out of range")
    bits = patterns.columns.T[indices].reshape(rows, cols)
    return BitMask(bits, NmConfig(m, patterns.kept))


def indices_from_mask(mask: BitMask, patterns: PatternMatrix) -> np.ndarray:
    """Recover the per-block pattern index of a valid mask (row-major)."""
    report = validate_mask(mask)
    if not report.ok:
        raise ValueError(f"invalid mask: {report}")
    m = patterns.block_len
    blocks = mask.bits.reshape(-1, m)
    # encode each block as an integer and look it up against the pattern columns
    weights = 1 << np.arange(m - 1, -1, -1)
    codes = blocks @ weights
    table = {int(patterns.columns[:, i] @ weights): i for i in range(patterns.pattern_count)}
    return np.array([table[int(c)] for c in codes], dtype=np.int64)


def pack_indices(indices: np.ndarray) -> bytes:
    """Pack 2-bit in-block indices four per byte, little-endian within the byte."""
    idx = np.asarray(indices, dtype=np.uint8).ravel()
    if idx.size and idx.max() > 3:
        raise ValueError("2-bit packing requires indices in [0, 3]")
    padded = np.zeros((idx.size + 3) // 4 * 4, dtype=np.uint8)
    padded[: idx.size] = idx
    quads = padded.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_indices(data: bytes, count: int) -> np.ndarray:
    """Inverse of :func:`pack_indices` for the first ``count`` indices."""
    if len(data) * 4 < count:
        raise ValueError(f"buffer holds {len(data) * 4} indices, need {count}")
    packed = np.frombuffer(data, dtype=np.uint8)
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    quads = (packed[:, None] >> shifts[None, :]) & 3
    return quads.reshape(-1)[:count].astype(np.uint8)
