"""Binary formats: IDX datasets, NMSK mask files, NMCL model checkpoints.

IDX keeps its external big-endian convention; the NMSK/NMCL formats are
little-endian throughout.  Mask files store one u8 pattern-choice index per
block (self-describing and bounds-checkable); model files store raw f64
payloads guarded by a CRC32.  Every loader rejects its documented corruption
classes with a distinct error type.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .patterns import (
    BitMask,
    NmConfig,
    enumerate_patterns,
    mask_from_indices,
    pattern_count,
)
from .runtime import CompositionalClassifier, ConvLayer, DenseLayer
from .sampler import FREEZE_DETERMINISTIC, FREEZE_STOCHASTIC

__all__ = [
    "FormatError",
    "BadMagicError",
    "TruncatedPayloadError",
    "CountMismatchError",
    "VersionError",
    "CorruptIndexError",
    "ChecksumError",
    "IdxDataset",
    "load_idx",
    "save_idx_images",
    "save_idx_labels",
    "MaskRecord",
    "save_mask",
    "load_mask",
    "save_model",
    "load_model",
    "weight_payload_checksum",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
MASK_MAGIC = b"NMSK"
MODEL_MAGIC = b"NMCL"
MASK_VERSION = 1
MODEL_VERSION = 1

_FREEZE_CODES = {FREEZE_DETERMINISTIC: 0, FREEZE_STOCHASTIC: 1}
_FREEZE_NAMES = {v: k for k, v in _FREEZE_CODES.items()}
_KIND_CONV, _KIND_DENSE = 0, 1
_ACT_CODES = {"relu": 0, "identity": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


class FormatError(ValueError):
    """Base class for file-format violations."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class VersionError(FormatError):
    pass


class CorruptIndexError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"{self.name}: truncated payload (need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> bool:
        return self.pos == len(self.data)


# ---------------------------------------------------------------------------
# IDX datasets
# ---------------------------------------------------------------------------


@dataclass
class IdxDataset:
    """Raw u8 images and labels plus the normalization constants applied by
    :meth:`tensors`.  Defaults suit single-channel [0,1]-scaled images; RGB
    pipelines conventionally use per-channel means (0.485, 0.456, 0.406) and
    stds (0.229, 0.224, 0.225)."""

    images: np.ndarray  # (count, rows, cols) uint8
    labels: np.ndarray  # (count,) uint8
    mean: float = 0.5
    std: float = 0.5

    def __len__(self) -> int:
        return self.images.shape[0]

    def tensors(self) -> tuple[np.ndarray, np.ndarray]:
        """Normalized float inputs (count, 1, rows, cols) and int64 labels."""
        x = (self.images.astype(np.float64) / 255.0 - self.mean) / self.std
        return x[:, None, :, :], self.labels.astype(np.int64)


def load_idx(
    images_path, labels_path, mean: float = 0.5, std: float = 0.5
) -> IdxDataset:
    """Parse a big-endian IDX image/label file pair with cross-checked counts."""
    img_reader = _Reader(Path(images_path).read_bytes(), str(images_path))
    (magic,) = img_reader.unpack(">I")
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagicError(
            f"{images_path}: wrong magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    count, rows, cols = img_reader.unpack(">III")
    pixels = img_reader.take(count * rows * cols)
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows, cols)

    lab_reader = _Reader(Path(labels_path).read_bytes(), str(labels_path))
    (magic,) = lab_reader.unpack(">I")
    if magic != IDX_LABEL_MAGIC:
        raise BadMagicError(
            f"{labels_path}: wrong magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    (lab_count,) = lab_reader.unpack(">I")
    labels = np.frombuffer(lab_reader.take(lab_count), dtype=np.uint8)
    if lab_count != count:
        raise CountMismatchError(
            f"image count {count} != label count {lab_count}"
        )
    return IdxDataset(images.copy(), labels.copy(), mean, std)


def save_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (count, rows, cols)")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ValueError("labels must be 1-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# NMSK mask files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskRecord:
    """One layer's frozen mask as per-block pattern-choice indices."""

    name: str
    rows: int
    cols: int  # augmented width
    indices: np.ndarray  # (block_count,) uint8
    freeze_mode: str = FREEZE_DETERMINISTIC
    freeze_seed: int = 0
    config: NmConfig = NmConfig()

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.uint8).ravel()
        blocks = self.rows * self.cols // self.config.block_len
        if self.cols % self.config.block_len != 0:
            raise ValueError(f"cols {self.cols} not a multiple of block_len")
        if idx.shape[0] != blocks:
            raise ValueError(f"expected {blocks} indices, got {idx.shape[0]}")
        n = pattern_count(self.config)
        if idx.size and idx.max() >= n:
            raise CorruptIndexError(
                f"layer {self.name}: choice index {int(idx.max())} >= pattern count {n}"
            )
        if self.freeze_mode not in _FREEZE_CODES:
            raise ValueError(f"unknown freeze mode {self.freeze_mode!r}")
        object.__setattr__(self, "indices", idx)

    def to_bitmask(self) -> BitMask:
        patterns = enumerate_patterns(self.config)
        return mask_from_indices(self.indices, patterns, self.rows, self.cols)


def save_mask(path, records: list[MaskRecord]) -> None:
    """Write an NMSK v1 file (little-endian)."""
    if records:
        config = records[0].config
        if any(r.config != config for r in records):
            raise ValueError("all mask records must share one N:M configuration")
    else:
        config = NmConfig()
    blob = bytearray()
    blob += MASK_MAGIC
    blob += struct.pack("<HBBI", MASK_VERSION, config.block_len, config.kept, len(records))
    for rec in records:
        name = rec.name.encode("utf-8")
        blob += struct.pack("<H", len(name)) + name
        blob += struct.pack("<IIQ", rec.rows, rec.cols, rec.indices.shape[0])
        blob += rec.indices.tobytes()
        blob += struct.pack("<BQ", _FREEZE_CODES[rec.freeze_mode], rec.freeze_seed)
    Path(path).write_bytes(bytes(blob))


def load_mask(path) -> list[MaskRecord]:
    """Read an NMSK file, rejecting bad magic/version and out-of-range indices."""
    reader = _Reader(Path(path).read_bytes(), str(path))
    magic = reader.take(4)
    if magic != MASK_MAGIC:
        raise BadMagicError(f"{path}: wrong magic {magic!r}, expected {MASK_MAGIC!r}")
    version, m, k, count = reader.unpack("<HBBI")
    if version != MASK_VERSION:
        raise VersionError(f"{path}: unsupported mask version {version}")
    config = NmConfig(m, k)
    n = pattern_count(config)
    records = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        rows, cols, blocks = reader.unpack("<IIQ")
        idx = np.frombuffer(reader.take(blocks), dtype=np.uint8)
        if idx.size and idx.max() >= n:
            raise CorruptIndexError(
                f"{path}: layer {name}: choice index {int(idx.max())} >= {n}"
            )
        mode_code, seed = reader.unpack("<BQ")
        if mode_code not in _FREEZE_NAMES:
            raise CorruptIndexError(f"{path}: unknown freeze mode code {mode_code}")
        records.append(
            MaskRecord(name, rows, cols, idx.copy(), _FREEZE_NAMES[mode_code], seed, config)
        )
    if not reader.done():
        raise FormatError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return records


# ---------------------------------------------------------------------------
# NMCL model checkpoints
# ---------------------------------------------------------------------------


def _payload_bytes(model: CompositionalClassifier) -> bytes:
    chunks = []
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            chunks.append(np.ascontiguousarray(layer.kernels, dtype="<f8").tobytes())
        else:
            chunks.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(chunks)


def weight_payload_checksum(model: CompositionalClassifier) -> int:
    """CRC32 over every weight and bias byte; the frozen-weights fingerprint."""
    return zlib.crc32(_payload_bytes(model))


def save_model(path, model: CompositionalClassifier) -> None:
    """Write an NMCL v1 checkpoint (little-endian, CRC32-guarded payload)."""
    if len(model.input_shape) != 3:
        raise ValueError("only (c, h, w)-input models are serializable")
    blob = bytearray()
    blob += MODEL_MAGIC
    c, h, w = model.input_shape
    blob += struct.pack(
        "<HIIIII", MODEL_VERSION, c, h, w, model.class_count, len(model.layers)
    )
    for layer in model.layers:
        name = layer.name.encode("utf-8")
        if isinstance(layer, ConvLayer):
            blob += struct.pack("<BBB", _KIND_CONV, _ACT_CODES[layer.activation],
                                int(layer.maskable))
            blob += struct.pack("<H", len(name)) + name
            blob += struct.pack("<IIII", *layer.kernels.shape)
        elif isinstance(layer, DenseLayer):
            blob += struct.pack("<BBB", _KIND_DENSE, _ACT_CODES[layer.activation], 0)
            blob += struct.pack("<H", len(name)) + name
            blob += struct.pack("<II", *layer.weight.shape)
        else:
            raise TypeError(f"cannot serialize layer type {type(layer)!r}")
    payload = _payload_bytes(model)
    blob += payload
    blob += struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(bytes(blob))


def load_model(path) -> CompositionalClassifier:
    """Read an NMCL checkpoint, verifying the payload checksum."""
    reader = _Reader(Path(path).read_bytes(), str(path))
    magic = reader.take(4)
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"{path}: wrong magic {magic!r}, expected {MODEL_MAGIC!r}")
    version, c, h, w, classes, layer_count = reader.unpack("<HIIIII")
    if version != MODEL_VERSION:
        raise VersionError(f"{path}: unsupported model version {version}")
    descs = []
    for _ in range(layer_count):
        kind, act_code, maskable = reader.unpack("<BBB")
        if act_code not in _ACT_NAMES:
            raise FormatError(f"{path}: unknown activation code {act_code}")
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        if kind == _KIND_CONV:
            shape = reader.unpack("<IIII")
        elif kind == _KIND_DENSE:
            shape = reader.unpack("<II")
        else:
            raise FormatError(f"{path}: unknown layer kind {kind}")
        descs.append((kind, _ACT_NAMES[act_code], bool(maskable), name, shape))

    payload_len = sum(
        (int(np.prod(shape)) + shape[0]) * 8 for _, _, _, _, shape in descs
    )
    payload = reader.take(payload_len)
    (stored_crc,) = reader.unpack("<I")
    if not reader.done():
        raise FormatError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    layers = []
    offset = 0

    def take_f64(count: int) -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        return arr.astype(np.float64)

    for kind, act, maskable, name, shape in descs:
        if kind == _KIND_CONV:
            kernels = take_f64(int(np.prod(shape))).reshape(shape)
            bias = take_f64(shape[0])
            layers.append(ConvLayer(name, kernels, bias, act, maskable))
        else:
            weight = take_f64(int(np.prod(shape))).reshape(shape)
            bias = take_f64(shape[0])
            layers.append(DenseLayer(name, weight, bias, act))
    return CompositionalClassifier(layers, (c, h, w), classes)
