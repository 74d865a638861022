"""Deterministic synthetic digit-style image datasets.

Desk-scale stand-in for a real classification pipeline: each class gets a
smooth random prototype glyph; samples are shifted, amplitude-jittered, noisy
copies quantized to uint8.  Everything derives from one seed, so datasets are
reproducible byte-for-byte.  ``python -m nmconv.synth`` writes IDX files.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

__all__ = ["class_prototypes", "sample_dataset", "main"]


def _upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsample of a square grid to size x size."""
    src = grid.shape[0]
    pos = np.linspace(0, src - 1, size)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = grid[lo][:, lo] * np.outer(1 - frac, 1 - frac)
    rows += grid[lo][:, hi] * np.outer(1 - frac, frac)
    rows += grid[hi][:, lo] * np.outer(frac, 1 - frac)
    rows += grid[hi][:, hi] * np.outer(frac, frac)
    return rows


def class_prototypes(classes: int, size: int, seed: int) -> np.ndarray:
    """Smooth per-class glyphs in [0, 1], shape (classes, size, size)."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    protos = np.empty((classes, size, size))
    for c in range(classes):
        coarse = rng.random((5, 5))
        img = _upsample_bilinear(coarse, size)
        img -= img.min()
        peak = img.max()
        if peak > 0:
            img /= peak
        protos[c] = img
    return protos


def sample_dataset(
    count: int,
    classes: int = 10,
    size: int = 16,
    seed: int = 7,
    sample_seed: int | None = None,
    max_shift: int = 2,
    noise: float = 0.35,
    amplitude: tuple[float, float] = (0.7, 1.3),
) -> tuple[np.ndarray, np.ndarray]:
    """Generate (images uint8 (count, size, size), labels uint8 (count,)).

    ``seed`` fixes the class prototypes; ``sample_seed`` (default seed+1) the
    per-sample draws, so disjoint train/test splits of the same task use one
    ``seed`` with different ``sample_seed`` values.
    """
    if count <= 0 or classes < 2 or classes > 255:
        raise ValueError("need count > 0 and 2 <= classes <= 255")
    protos = class_prototypes(classes, size, seed)
    if sample_seed is None:
        sample_seed = int(seed) + 1
    rng = np.random.Generator(np.random.Philox(key=int(sample_seed)))
    labels = rng.integers(0, classes, size=count).astype(np.uint8)
    images = np.empty((count, size, size), dtype=np.uint8)
    for i in range(count):
        img = protos[labels[i]]
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        img = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
        amp = rng.uniform(*amplitude)
        img = amp * img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    return images, labels


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="write a synthetic IDX dataset")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--train", type=int, default=10000)
    parser.add_argument("--test", type=int, default=2000)
    parser.add_argument("--classes", type=int, default=10)
    parser.add_argument("--size", type=int, default=16)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)

    from .io import save_idx_images, save_idx_labels

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, count, sub in (("train", args.train, 1), ("test", args.test, 2)):
        images, labels = sample_dataset(
            count,
            classes=args.classes,
            size=args.size,
            seed=args.seed,
            sample_seed=args.seed * 1000 + sub,
        )
        save_idx_images(out / f"{split}-images.idx3-ubyte", images)
        save_idx_labels(out / f"{split}-labels.idx1-ubyte", labels)
        print(f"wrote {split}: {count} images of {args.size}x{args.size}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
