"""Rank-4 tensors and the patch unfolding primitives.

Tensors are plain ``numpy.ndarray`` objects of shape ``(N, C, H, W)`` in C order,
so element ``(n, c, h, w)`` sits at flat index ``((n*C + c)*H + h)*W + w``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0
    out_channels: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.kernel_h, self.kernel_w, self.out_channels) < 1:
            raise ShapeError(f"channels and kernel sizes must be positive: {self}")
        if self.stride < 1 or self.pad < 0:
            raise ShapeError(f"need stride >= 1 and pad >= 0: {self}")

    @property
    def n(self) -> int:
        """Patch length (elements per receptive field)."""
        return self.in_channels * self.kernel_h * self.kernel_w

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.pad - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return ho, wo


def zeros(n: int, c: int, h: int, w: int, dtype=np.float64) -> np.ndarray:
    return np.zeros((n, c, h, w), dtype=dtype)


def as_tensor4(x, dtype=None) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=dtype)
    if x.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got shape {x.shape}")
    return x


def flat_index(shape: tuple[int, int, int, int], n: int, c: int, h: int, w: int) -> int:
    N, C, H, W = shape
    if not (0 <= n < N and 0 <= c < C and 0 <= h < H and 0 <= w < W):
        raise IndexError(f"index {(n, c, h, w)} outside shape {shape}")
    return ((n * C + c) * H + h) * W + w


def fill(x: np.ndarray, value: float) -> np.ndarray:
    x[...] = value
    return x


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a*x + y`` without touching either operand."""
    if x.shape != y.shape:
        raise ShapeError(f"axpy shape mismatch {x.shape} vs {y.shape}")
    return a * x + y


def map_elementwise(fn, x: np.ndarray) -> np.ndarray:
    out = fn(x)
    if np.shape(out) != x.shape:
        raise ShapeError("elementwise map changed the shape")
    return out


def channel_mean_var(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (biased) variance over the N, H, W axes."""
    x = as_tensor4(x)
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def _check_input(x: np.ndarray, geom: ConvGeometry) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) input, got {x.shape}")
    if x.shape[1] != geom.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, geometry expects {geom.in_channels}"
        )


def im2col_batch(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Unfold every receptive field of a batch into columns.

    Returns an array of shape ``(N, n, Ho*Wo)``. Row order inside a column is
    channel, then kernel row, then kernel column; column ``p*Wo + q`` is the
    patch read at output location ``(p, q)``. Padded positions are zero.
    """
    _check_input(x, geom)
    N, C, H, W = x.shape
    ho, wo = geom.output_hw(H, W)
    p, s = geom.pad, geom.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((N, C, geom.kernel_h, geom.kernel_w, ho, wo), dtype=x.dtype)
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            cols[:, :, i, j] = x[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(N, geom.n, ho * wo)


def col2im_batch(cols: np.ndarray, geom: ConvGeometry, out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`im2col_batch`: scatter-add columns back to images."""
    H, W = out_hw
    ho, wo = geom.output_hw(H, W)
    if cols.ndim != 3 or cols.shape[1:] != (geom.n, ho * wo):
        raise ShapeError(
            f"columns of shape {cols.shape} do not match (N, {geom.n}, {ho * wo})"
        )
    N = cols.shape[0]
    C, p, s = geom.in_channels, geom.pad, geom.stride
    cols = cols.reshape(N, C, geom.kernel_h, geom.kernel_w, ho, wo)
    img = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            img[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, i, j]
    return img[:, :, p : p + H, p : p + W]


def im2col(image: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Single-sample unfolding; ``image`` is ``(C, H, W)`` or ``(1, C, H, W)``.

    Returns the ``(n, Ho*Wo)`` patch matrix.
    """
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeError(f"expected one sample, got shape {image.shape}")
    return im2col_batch(image, geom)[0]


def col2im(cols: np.ndarray, geom: ConvGeometry, out_hw: tuple[int, int]) -> np.ndarray:
    """Single-sample adjoint of :func:`im2col`; returns ``(C, H, W)``."""
    cols = np.asarray(cols)
    if cols.ndim != 2:
        raise ShapeError(f"expected an (n, L) patch matrix, got {cols.shape}")
    return col2im_batch(cols[None], geom, out_hw)[0]
