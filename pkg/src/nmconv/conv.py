"""Convolution three ways: direct sliding window, unfold + matmul, masked matmul.

All paths compute the same stride-1, zero-padded ("same") multi-channel 2-D
convolution.  The unfold operator rewrites the input so the whole layer is one
matrix product between a flattened weight matrix and the unfolded input; with
full padding the number of output positions L equals height*width.  Tap order
is pinned to (channel, kernel row, kernel col) in both the unfold rows and the
weight-matrix columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .patterns import BitMask, validate_mask

__all__ = [
    "WeightMatrix",
    "UnfoldedInput",
    "conv_direct",
    "unfold",
    "unfold_batch",
    "fold_batch",
    "kernels_to_weight_matrix",
    "conv_matmul",
    "masked_conv",
]


@dataclass(frozen=True)
class WeightMatrix:
    """c_out x cols flattening of a kernel stack, one kernel per row.

    ``cols`` may exceed ``real_cols`` by trailing structural zero columns that
    align the width to a multiple of 4.
    """

    matrix: np.ndarray
    kernel_shape: tuple[int, int, int]  # (c_in, kh, kw)
    real_cols: int

    def __post_init__(self) -> None:
        mat = np.asarray(self.matrix, dtype=np.float64)
        c_in, kh, kw = self.kernel_shape
        if self.real_cols != c_in * kh * kw:
            raise ValueError("real_cols must equal c_in * kh * kw")
        if mat.ndim != 2 or mat.shape[1] < self.real_cols:
            raise ValueError(f"bad weight matrix shape {mat.shape}")
        object.__setattr__(self, "matrix", mat)

    @property
    def c_out(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def structural_cols(self) -> int:
        return self.cols - self.real_cols

    def kernels(self) -> np.ndarray:
        """Recover the (c_out, c_in, kh, kw) kernel stack."""
        return self.matrix[:, : self.real_cols].reshape((self.c_out, *self.kernel_shape))


@dataclass(frozen=True)
class UnfoldedInput:
    """(c_in*kh*kw) x L tap matrix; column l holds the receptive field of
    output position l (row-major over positions)."""

    matrix: np.ndarray
    out_hw: tuple[int, int]

    @property
    def positions(self) -> int:
        return self.matrix.shape[1]


def _check_tensor3(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"{name} must be a (channels, height, width) tensor, got {x.shape}")
    if min(x.shape) == 0:
        raise ValueError(f"{name} has a zero-length dimension: {x.shape}")
    return x


def _check_kernels(kernels: np.ndarray) -> np.ndarray:
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 4:
        raise ValueError(
            f"kernels must be (c_out, c_in, kh, kw), got shape {kernels.shape}"
        )
    _, _, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
    return kernels


def conv_direct(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Sliding-window convolution; out-of-range taps contribute zero.

    Stride 1, full zero padding (kh//2, kw//2), so the output keeps the input's
    spatial size.  Kept free of the unfold machinery to serve as an independent
    reference for the matmul paths.
    """
    x = _check_tensor3(x)
    kernels = _check_kernels(kernels)
    c_out, c_in, kh, kw = kernels.shape
    if c_in != x.shape[0]:
        raise ValueError(f"channel mismatch: kernels expect {c_in}, input has {x.shape[0]}")
    _, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((c_in, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, ph : ph + h, pw : pw + w] = x
    out = np.zeros((c_out, h, w), dtype=np.float64)
    for o in range(c_out):
        for c in range(c_in):
            for di in range(kh):
                for dj in range(kw):
                    out[o] += kernels[o, c, di, dj] * xp[c, di : di + h, dj : dj + w]
    return out


def _unfold_geometry(
    shape: tuple[int, int, int],
    kernel_dims: tuple[int, int],
    padding: tuple[int, int] | None,
):
    c_in, h, w = shape
    kh, kw = kernel_dims
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
    if padding is None:
        padding = (kh // 2, kw // 2)
    ph, pw = padding
    if ph < 0 or pw < 0:
        raise ValueError("padding must be non-negative")
    oh = h + 2 * ph - kh + 1
    ow = w + 2 * pw - kw + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"dimension underflow: kernel {kh}x{kw} with padding {padding} "
            f"on {h}x{w} input"
        )
    return (ph, pw), (oh, ow)


def unfold(
    x: np.ndarray,
    kernel_dims: tuple[int, int],
    padding: tuple[int, int] | None = None,
) -> UnfoldedInput:
    """im2col: gather each output position's receptive field into one column."""
    x = _check_tensor3(x)
    u = unfold_batch(x[None], kernel_dims, padding)
    return UnfoldedInput(u.matrix[0], u.out_hw)


@dataclass(frozen=True)
class _BatchUnfold:
    matrix: np.ndarray  # (batch, c_in*kh*kw, L)
    out_hw: tuple[int, int]


def unfold_batch(
    x: np.ndarray,
    kernel_dims: tuple[int, int],
    padding: tuple[int, int] | None = None,
) -> _BatchUnfold:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or min(x.shape) == 0:
        raise ValueError(f"expected (batch, c, h, w) input, got shape {x.shape}")
    b, c_in, h, w = x.shape
    kh, kw = kernel_dims
    (ph, pw), (oh, ow) = _unfold_geometry((c_in, h, w), kernel_dims, padding)
    xp = np.zeros((b, c_in, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, :, ph : ph + h, pw : pw + w] = x
    u = np.empty((b, c_in * kh * kw, oh * ow), dtype=np.float64)
    for c in range(c_in):
        for di in range(kh):
            for dj in range(kw):
                row = (c * kh + di) * kw + dj
                u[:, row, :] = xp[:, c, di : di + oh, dj : dj + ow].reshape(b, oh * ow)
    return _BatchUnfold(u, (oh, ow))


def fold_batch(
    du: np.ndarray,
    input_shape: tuple[int, int, int],
    kernel_dims: tuple[int, int],
    padding: tuple[int, int] | None = None,
) -> np.ndarray:
    """Adjoint of :func:`unfold_batch`: scatter-add tap gradients back onto the
    input tensor."""
    c_in, h, w = input_shape
    kh, kw = kernel_dims
    (ph, pw), (oh, ow) = _unfold_geometry(input_shape, kernel_dims, padding)
    b = du.shape[0]
    if du.shape != (b, c_in * kh * kw, oh * ow):
        raise ValueError(f"unexpected unfolded gradient shape {du.shape}")
    du6 = du.reshape(b, c_in, kh, kw, oh, ow)
    dxp = np.zeros((b, c_in, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            dxp[:, :, di : di + oh, dj : dj + ow] += du6[:, :, di, dj]
    return dxp[:, :, ph : ph + h, pw : pw + w]


def kernels_to_weight_matrix(kernels: np.ndarray, align4: bool = True) -> WeightMatrix:
    """Flatten a kernel stack to c_out rows in (channel, row, col) order; with
    ``align4`` the width is padded to a multiple of 4 by structural zero columns."""
    kernels = _check_kernels(kernels)
    c_out, c_in, kh, kw = kernels.shape
    real = c_in * kh * kw
    mat = kernels.reshape(c_out, real)
    if align4 and real % 4 != 0:
        padded = (real + 3) // 4 * 4
        full = np.zeros((c_out, padded), dtype=np.float64)
        full[:, :real] = mat
        mat = full
    return WeightMatrix(mat.copy(), (c_in, kh, kw), real)


def _pad_unfolded(w: WeightMatrix, u: np.ndarray) -> np.ndarray:
    """Append all-zero tap rows so structural weight columns meet zero rows."""
    if u.shape[0] == w.cols:
        return u
    if u.shape[0] != w.real_cols:
        raise ValueError(
            f"unfolded input has {u.shape[0]} rows; weight matrix expects "
            f"{w.real_cols} (or {w.cols} augmented)"
        )
    pad = np.zeros((w.structural_cols, u.shape[1]), dtype=np.float64)
    return np.concatenate([u, pad], axis=0)


def conv_matmul(w: WeightMatrix, u: UnfoldedInput) -> np.ndarray:
    """Convolution as one matrix product: reshape(W @ U(X))."""
    mat = _pad_unfolded(w, u.matrix)
    oh, ow = u.out_hw
    y = w.matrix @ mat
    return y.reshape(w.c_out, oh, ow)


def masked_conv(w: WeightMatrix, mask, u: UnfoldedInput) -> np.ndarray:
    """Convolution with an elementwise weight mask: reshape((M * W) @ U(X)).

    ``mask`` is either a hard :class:`BitMask` or a real-valued soft mask of
    the augmented weight shape.
    """
    if isinstance(mask, BitMask):
        report = validate_mask(mask)
        if not report.ok:
            raise ValueError(f"invalid mask: {report}")
        mask_arr = mask.bits.astype(np.float64)
    else:
        mask_arr = np.asarray(mask, dtype=np.float64)
    if mask_arr.shape != w.matrix.shape:
        raise ValueError(
            f"mask shape {mask_arr.shape} does not match weight matrix {w.matrix.shape}"
        )
    masked = WeightMatrix(mask_arr * w.matrix, w.kernel_shape, w.real_cols)
    return conv_matmul(masked, u)
