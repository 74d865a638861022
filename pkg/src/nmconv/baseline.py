"""Magnitude heuristics for 2:4 masks: per-block top-2 selection, a retained-
magnitude efficacy score, and a greedy column-permutation search.

This is the no-retraining comparison regime: masks are read off the weight
magnitudes directly, optionally after permuting the weight matrix's input
columns so that large weights share blocks less often.  A column permutation
composed with the matching row permutation of the unfolded input leaves the
product unchanged, so permuted masks evaluate exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .conv import WeightMatrix
from .patterns import BitMask, NmConfig, enumerate_patterns, mask_from_indices

__all__ = [
    "PermutationPlan",
    "magnitude_prune_block",
    "magnitude_prune_matrix",
    "efficacy_score",
    "permutation_search",
    "unpermute_mask",
    "random_mask",
]

_CONFIG = NmConfig(4, 2)
_PATTERNS = enumerate_patterns(_CONFIG)
_PAIR_INDEX = {
    pair: i for i, pair in enumerate(combinations(range(4), 2))
}
# maps (a, b) with a < b to the lexicographic pattern index; inverse of kept_positions
_PAIR_LOOKUP = np.full((4, 4), -1, dtype=np.int64)
for (a, b), i in _PAIR_INDEX.items():
    _PAIR_LOOKUP[a, b] = i


def _as_matrix(w) -> np.ndarray:
    mat = w.matrix if isinstance(w, WeightMatrix) else np.asarray(w, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {mat.shape}")
    if mat.shape[1] % 4 != 0:
        raise ValueError(
            f"matrix width {mat.shape[1]} is not 4-aligned; augment it first"
        )
    return np.asarray(mat, dtype=np.float64)


def magnitude_prune_block(block: np.ndarray) -> int:
    """Pattern index keeping the two largest-magnitude entries of a 4-block;
    magnitude ties break toward the lower element index."""
    block = np.asarray(block, dtype=np.float64).ravel()
    if block.shape != (4,):
        raise ValueError(f"block must have exactly 4 entries, got {block.shape}")
    order = np.argsort(-np.abs(block), kind="stable")
    a, b = sorted(int(i) for i in order[:2])
    return int(_PAIR_LOOKUP[a, b])


def _block_choices(mat: np.ndarray) -> np.ndarray:
    """Vectorized per-block magnitude choice over a whole 4-aligned matrix."""
    rows, cols = mat.shape
    blocks = np.abs(mat).reshape(rows * cols // 4, 4)
    order = np.argsort(-blocks, axis=1, kind="stable")[:, :2]
    lo = order.min(axis=1)
    hi = order.max(axis=1)
    return _PAIR_LOOKUP[lo, hi]


def magnitude_prune_matrix(w) -> BitMask:
    """Blockwise top-2-magnitude mask of a 4-aligned weight matrix."""
    mat = _as_matrix(w)
    idx = _block_choices(mat)
    return mask_from_indices(idx, _PATTERNS, mat.shape[0], mat.shape[1])


def efficacy_score(w, mask) -> float:
    """Retained-magnitude fraction sum|W * M| / sum|W| in [0, 1].

    The external pruning literature scores patterns with an undocumented
    formula; this is the simplest monotone surrogate, not a replication.
    All-zero matrices score 1 by convention (nothing can be lost).
    """
    mat = w.matrix if isinstance(w, WeightMatrix) else np.asarray(w, dtype=np.float64)
    bits = mask.bits if isinstance(mask, BitMask) else np.asarray(mask)
    if bits.shape != mat.shape:
        raise ValueError(f"mask shape {bits.shape} does not match weights {mat.shape}")
    total = np.abs(mat).sum()
    if total == 0.0:
        return 1.0
    return float(np.abs(mat * bits).sum() / total)


@dataclass(frozen=True)
class PermutationPlan:
    """A column permutation of the weight matrix and its bookkeeping.

    ``permutation[k]`` is the original column placed at position k; applying
    then inverting is the identity.
    """

    permutation: np.ndarray
    inverse: np.ndarray
    score_before: float
    score_after: float

    def __post_init__(self) -> None:
        p = np.asarray(self.permutation, dtype=np.int64)
        inv = np.asarray(self.inverse, dtype=np.int64)
        if sorted(p.tolist()) != list(range(p.size)) or not np.array_equal(
            p[inv], np.arange(p.size)
        ):
            raise ValueError("not a valid permutation/inverse pair")
        object.__setattr__(self, "permutation", p)
        object.__setattr__(self, "inverse", inv)

    def apply(self, mat: np.ndarray) -> np.ndarray:
        return mat[:, self.permutation]

    def undo(self, mat: np.ndarray) -> np.ndarray:
        return mat[:, self.inverse]


def _retained_per_blockcol(mat: np.ndarray) -> np.ndarray:
    """Sum of the two largest |values| per block, shaped (rows, blocks)."""
    rows, cols = mat.shape
    blocks = np.abs(mat).reshape(rows, cols // 4, 4)
    part = np.sort(blocks, axis=2)[:, :, 2:]
    return part.sum(axis=2)


def permutation_search(w, budget: int) -> tuple[PermutationPlan, BitMask]:
    """Greedy local search over column swaps maximizing the efficacy score.

    Starting from the identity, repeatedly applies the best strictly-improving
    swap of two columns (ties toward the lowest column pair) until no swap
    improves or ``budget`` candidate evaluations are spent.  Returns the plan
    and the magnitude mask of the permuted matrix.
    """
    if budget < 0:
        raise ValueError("budget must be non-negative")
    mat = _as_matrix(w).copy()
    rows, cols = mat.shape
    total = np.abs(mat).sum()
    perm = np.arange(cols, dtype=np.int64)

    retained = _retained_per_blockcol(mat)

    def score_now() -> float:
        return 1.0 if total == 0 else float(retained.sum() / total)

    score_before = score_now()
    evals_left = budget
    improved = True
    while improved and evals_left > 0:
        improved = False
        best_gain = 0.0
        best_pair = None
        base = retained
        for i in range(cols):
            if evals_left <= 0:
                break
            for jj in range(i + 1, cols):
                if evals_left <= 0:
                    break
                evals_left -= 1
                bi, bj = i // 4, jj // 4
                if bi == bj:
                    continue  # swapping inside one block never changes the kept set
                cols_i = mat[:, i].copy()
                mat[:, i] = mat[:, jj]
                mat[:, jj] = cols_i
                new_bi = _retained_per_blockcol(mat[:, bi * 4 : bi * 4 + 4])
                new_bj = _retained_per_blockcol(mat[:, bj * 4 : bj * 4 + 4])
                gain = float(
                    (new_bi[:, 0] - base[:, bi]).sum() + (new_bj[:, 0] - base[:, bj]).sum()
                )
                # undo the trial swap
                cols_i = mat[:, i].copy()
                mat[:, i] = mat[:, jj]
                mat[:, jj] = cols_i
                if gain > best_gain + 1e-15:
                    best_gain = gain
                    best_pair = (i, jj)
        if best_pair is not None:
            i, jj = best_pair
            mat[:, [i, jj]] = mat[:, [jj, i]]
            perm[[i, jj]] = perm[[jj, i]]
            retained = _retained_per_blockcol(mat)
            improved = True

    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(cols)
    plan = PermutationPlan(perm, inverse, score_before, score_now())
    return plan, magnitude_prune_matrix(mat)


def unpermute_mask(mask: BitMask, plan: PermutationPlan) -> np.ndarray:
    """Carry a mask found in permuted column order back to the original order.

    The result is generally not block-valid in original coordinates (that is
    the point of permuting); it is returned as a plain {0,1} array for
    evaluating the masked weights.
    """
    bits = np.empty_like(mask.bits)
    bits[:, plan.permutation] = mask.bits
    return bits


def random_mask(rows: int, cols: int, seed: int, config: NmConfig = _CONFIG) -> BitMask:
    """Uniformly random valid mask: one pattern drawn per block."""
    patterns = enumerate_patterns(config)
    if cols % config.block_len != 0:
        raise ValueError(f"cols {cols} not a multiple of {config.block_len}")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    idx = rng.integers(0, patterns.pattern_count, size=rows * cols // config.block_len)
    return mask_from_indices(idx, patterns, rows, cols)
