"""Gumbel-Softmax distributions over per-block pattern choices.

Each maskable layer owns one trainable logit vector per weight block.  Soft
samples (temperature-tau softmax of logits plus Gumbel noise) drive training;
hard samples (argmax) and the final freeze produce {0,1} masks.  Blocks that
overlap structural zero-padding columns are pinned to pattern 0 and excluded
from learning: their columns only ever multiply zero weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .patterns import BitMask, NmConfig, PatternMatrix, mask_from_indices, pattern_count

__all__ = [
    "MaskLogits",
    "FrozenMask",
    "derive_seed",
    "sample_gumbel",
    "gs_soft_sample",
    "gs_hard_sample",
    "soft_choice_grad",
    "assemble_mask",
    "freeze_indices",
    "freeze",
    "choice_entropy",
]

FREEZE_DETERMINISTIC = "deterministic"
FREEZE_STOCHASTIC = "stochastic"


def derive_seed(base_seed: int, *tags: int) -> int:
    """Stable per-(layer, draw, ...) sub-seed so parallel evaluation order
    cannot change any stream."""
    state = np.random.SeedSequence([int(base_seed), *[int(t) for t in tags]])
    return int(state.generate_state(1, np.uint64)[0])


def sample_gumbel(block_count: int, n: int, rng_seed: int) -> np.ndarray:
    """Draw Gumbel(0,1) noise, one value per (block, pattern slot).

    Uses the counter-based Philox generator keyed by ``rng_seed``: the value at
    (block b, slot i) is a pure function of the key and the array position,
    independent of evaluation order.  Uniforms are kept inside the open
    interval so the double log never sees 0.
    """
    if block_count <= 0 or n <= 0:
        raise ValueError("block_count and n must be positive")
    rng = np.random.Generator(np.random.Philox(key=int(rng_seed)))
    u = rng.random((block_count, n))
    u = np.where(u == 0.0, np.finfo(np.float64).tiny, u)
    return -np.log(-np.log(u))


@dataclass
class MaskLogits:
    """Per-block choice logits (unnormalized log probabilities) for one layer.

    ``layer_shape`` is the augmented weight-matrix shape (rows, padded_cols);
    ``real_cols`` the width before structural zero padding.  ``pinned`` flags
    blocks that touch structural columns.
    """

    layer_shape: tuple[int, int]
    real_cols: int
    config: NmConfig
    logits: np.ndarray  # (block_count, n)
    temperature: float
    pinned: np.ndarray = field(default=None)  # (block_count,) bool

    def __post_init__(self) -> None:
        rows, padded = self.layer_shape
        m = self.config.block_len
        if padded % m != 0:
            raise ValueError(f"padded width {padded} not a multiple of {m}")
        if not 0 <= padded - self.real_cols < m:
            raise ValueError("real_cols inconsistent with padded layer shape")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        n = pattern_count(self.config)
        expect = (rows * padded // m, n)
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.shape != expect:
            raise ValueError(f"logits must have shape {expect}, got {logits.shape}")
        self.logits = logits
        if self.pinned is None:
            self.pinned = self._structural_blocks()
        else:
            self.pinned = np.asarray(self.pinned, dtype=bool)
            if self.pinned.shape != (expect[0],):
                raise ValueError("pinned flag count does not match block count")

    def _structural_blocks(self) -> np.ndarray:
        rows, padded = self.layer_shape
        m = self.config.block_len
        per_row = padded // m
        # block j spans columns [j*m, (j+1)*m); pinned iff it reaches past real_cols
        row_pinned = (np.arange(per_row) + 1) * m > self.real_cols
        return np.tile(row_pinned, rows)

    @property
    def block_count(self) -> int:
        return self.logits.shape[0]

    @property
    def n(self) -> int:
        return self.logits.shape[1]

    @property
    def trainable(self) -> np.ndarray:
        return ~self.pinned

    @classmethod
    def create(
        cls,
        rows: int,
        real_cols: int,
        config: NmConfig = NmConfig(),
        temperature: float = 0.1,
        seed: int = 0,
    ) -> "MaskLogits":
        """Glorot-uniform initialized logits over each block's n-vector
        (fan_in = fan_out = n)."""
        m = config.block_len
        padded = (real_cols + m - 1) // m * m
        n = pattern_count(config)
        limit = np.sqrt(3.0 / n)
        rng = np.random.Generator(np.random.Philox(key=int(seed)))
        logits = rng.uniform(-limit, limit, size=(rows * padded // m, n))
        return cls((rows, padded), real_cols, config, logits, temperature)


def _check_shapes(logits: MaskLogits, noise: np.ndarray) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != logits.logits.shape:
        raise ValueError(
            f"noise shape {noise.shape} does not match logits {logits.logits.shape}"
        )
    if not np.isfinite(noise).all():
        raise ValueError("noise must be finite")
    return noise


def gs_soft_sample(logits: MaskLogits, noise: np.ndarray) -> np.ndarray:
    """Per-block softmax of (g + log pi) / tau; rows sum to 1.

    Numerically stabilized by subtracting each block's maximum before
    exponentiation.  Pinned blocks return an exact one-hot on pattern 0.
    """
    if not np.isfinite(logits.logits).all():
        raise ValueError("logits must be finite")
    noise = _check_shapes(logits, noise)
    a = (noise + logits.logits) / logits.temperature
    a -= a.max(axis=1, keepdims=True)
    z = np.exp(a)
    z /= z.sum(axis=1, keepdims=True)
    if logits.pinned.any():
        z[logits.pinned] = 0.0
        z[logits.pinned, 0] = 1.0
    return z


def gs_hard_sample(logits: MaskLogits, noise: np.ndarray) -> np.ndarray:
    """One-hot at argmax of (g + log pi) per block; ties go to the lowest index."""
    noise = _check_shapes(logits, noise)
    winners = np.argmax(noise + logits.logits, axis=1)
    winners[logits.pinned] = 0
    z = np.zeros_like(logits.logits)
    z[np.arange(logits.block_count), winners] = 1.0
    return z


def soft_choice_grad(z: np.ndarray, dz: np.ndarray, logits: MaskLogits) -> np.ndarray:
    """Backprop a gradient w.r.t. soft choices ``z`` onto the logits.

    d z_i / d l_j = (z_i (delta_ij - z_j)) / tau; pinned blocks get zero.
    """
    inner = (z * dz).sum(axis=1, keepdims=True)
    grad = z * (dz - inner) / logits.temperature
    grad[logits.pinned] = 0.0
    return grad


def assemble_mask(
    choices: np.ndarray, patterns: PatternMatrix, layer_shape: tuple[int, int]
):
    """Lay per-block mixtures D @ z out row-major as a (rows, padded_cols) mask.

    Exact one-hot choices produce a :class:`BitMask`; fractional choices the
    real-valued soft mask used during training.
    """
    rows, padded = layer_shape
    m = patterns.block_len
    if padded % m != 0:
        raise ValueError(f"layer width {padded} not a multiple of {m}")
    choices = np.asarray(choices, dtype=np.float64)
    blocks = rows * padded // m
    if choices.shape != (blocks, patterns.pattern_count):
        raise ValueError(
            f"choices must have shape {(blocks, patterns.pattern_count)}, "
            f"got {choices.shape}"
        )
    full = (choices @ patterns.columns.T.astype(np.float64)).reshape(rows, padded)
    one_hot = np.isin(choices, (0.0, 1.0)).all() and np.array_equal(
        choices.sum(axis=1), np.ones(blocks)
    )
    if one_hot:
        return BitMask(full.astype(np.uint8), NmConfig(m, patterns.kept))
    return full


def freeze_indices(
    logits: MaskLogits, mode: str = FREEZE_DETERMINISTIC, seed: int = 0
) -> np.ndarray:
    """Final per-block pattern choice: argmax of the logits (deterministic) or
    one recorded-seed Gumbel draw (stochastic).  Pinned blocks choose 0."""
    if mode == FREEZE_DETERMINISTIC:
        winners = np.argmax(logits.logits, axis=1)
    elif mode == FREEZE_STOCHASTIC:
        noise = sample_gumbel(logits.block_count, logits.n, seed)
        winners = np.argmax(noise + logits.logits, axis=1)
    else:
        raise ValueError(f"unknown freeze mode {mode!r}")
    winners = winners.astype(np.int64)
    winners[logits.pinned] = 0
    return winners


def freeze(
    logits: MaskLogits,
    patterns: PatternMatrix,
    mode: str = FREEZE_DETERMINISTIC,
    seed: int = 0,
) -> BitMask:
    """Collapse trained logits into the inference bit mask."""
    idx = freeze_indices(logits, mode, seed)
    rows, padded = logits.layer_shape
    return mask_from_indices(idx, patterns, rows, padded)


@dataclass(frozen=True)
class FrozenMask:
    """A frozen layer mask plus the choice record needed to persist it."""

    name: str
    indices: np.ndarray
    mask: BitMask
    mode: str
    seed: int


def choice_entropy(logits: MaskLogits) -> float:
    """Mean entropy (nats) of the per-block choice distributions softmax(log pi),
    over trainable blocks only; 0.0 if every block is pinned."""
    if not logits.trainable.any():
        return 0.0
    a = logits.logits[logits.trainable]
    a = a - a.max(axis=1, keepdims=True)
    p = np.exp(a)
    p /= p.sum(axis=1, keepdims=True)
    h = -(p * np.log(np.maximum(p, 1e-300))).sum(axis=1)
    return float(h.mean())
