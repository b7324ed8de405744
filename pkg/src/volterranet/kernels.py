"""Linear and second-order Volterra convolution, forward and backward.

A Volterra filter answers each receptive-field patch ``x`` (length ``n``) with

    y(x) = sum_{i<=j} w2[i,j] x_i x_j + sum_i w1[i] x_i + b

The quadratic weights are stored packed, upper triangle row by row, so the
pair ``(i, j)`` with ``i <= j`` lives at ``i*n - i*(i-1)/2 + (j - i)``.
Everything is computed GEMM-style on im2col patch matrices; the full ``n x n``
weight matrix is never formed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import ConvGeometry, ShapeError, col2im_batch, im2col_batch

INTERACTIONS = ("cross", "per_channel")

# Upper bound on batch*pairs*locations held in memory at once.
_CHUNK_ELEMS = 1 << 22


def packed_index(i: int, j: int, n: int) -> int:
    if not 0 <= i <= j < n:
        raise IndexError(f"need 0 <= i <= j < n, got i={i}, j={j}, n={n}")
    return i * n - i * (i - 1) // 2 + (j - i)


def n_pairs(n: int) -> int:
    return n * (n + 1) // 2


@lru_cache(maxsize=64)
def _pairs(n: int, group: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.triu_indices(n)
    if group:
        keep = rows // group == cols // group
        rows, cols = rows[keep], cols[keep]
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def pair_indices(geom: ConvGeometry, interaction: str = "cross") -> tuple[np.ndarray, np.ndarray]:
    """Row/column index arrays of the quadratic terms, in packed order.

    ``"cross"`` keeps every pair of the patch, channels included.
    ``"per_channel"`` keeps only pairs whose elements share an input channel.
    """
    if interaction == "cross":
        return _pairs(geom.n, 0)
    if interaction == "per_channel":
        return _pairs(geom.n, geom.kernel_h * geom.kernel_w)
    raise ValueError(f"unknown interaction mode {interaction!r}")


@dataclass
class LinearFilterBank:
    geom: ConvGeometry
    w1: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        g = self.geom
        if self.w1.shape != (g.out_channels, g.n):
            raise ShapeError(f"w1 shape {self.w1.shape} != {(g.out_channels, g.n)}")
        if self.bias.shape != (g.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != {(g.out_channels,)}")

    @classmethod
    def zeros(cls, geom: ConvGeometry, dtype=np.float64) -> "LinearFilterBank":
        return cls(geom, np.zeros((geom.out_channels, geom.n), dtype), np.zeros(geom.out_channels, dtype))

    @property
    def params_per_filter(self) -> int:
        return self.geom.n + 1

    @property
    def num_params(self) -> int:
        return self.w1.size + self.bias.size


@dataclass
class VolterraFilterBank:
    geom: ConvGeometry
    w1: np.ndarray
    w2: np.ndarray
    bias: np.ndarray
    interaction: str = field(default="cross")

    def __post_init__(self):
        g = self.geom
        npair = pair_indices(g, self.interaction)[0].size
        if self.w1.shape != (g.out_channels, g.n):
            raise ShapeError(f"w1 shape {self.w1.shape} != {(g.out_channels, g.n)}")
        if self.w2.shape != (g.out_channels, npair):
            raise ShapeError(f"w2 shape {self.w2.shape} != {(g.out_channels, npair)}")
        if self.bias.shape != (g.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != {(g.out_channels,)}")

    @classmethod
    def zeros(cls, geom: ConvGeometry, interaction: str = "cross", dtype=np.float64) -> "VolterraFilterBank":
        npair = pair_indices(geom, interaction)[0].size
        return cls(
            geom,
            np.zeros((geom.out_channels, geom.n), dtype),
            np.zeros((geom.out_channels, npair), dtype),
            np.zeros(geom.out_channels, dtype),
            interaction,
        )

    @property
    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return pair_indices(self.geom, self.interaction)

    @property
    def params_per_filter(self) -> int:
        return self.geom.n + self.w2.shape[1] + 1

    @property
    def num_params(self) -> int:
        return self.w1.size + self.w2.size + self.bias.size


def quad2col(patches: np.ndarray, pairs: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Second-order monomials ``x_i * x_j`` (i <= j) of every patch column.

    ``patches`` is ``(n, L)`` or batched ``(N, n, L)``; the monomial axis takes
    the place of the patch axis.
    """
    patches = np.asarray(patches)
    if patches.ndim not in (2, 3):
        raise ShapeError(f"expected (n, L) or (N, n, L) patches, got {patches.shape}")
    n = patches.shape[-2]
    rows, cols = pairs if pairs is not None else _pairs(n, 0)
    if rows.size and max(rows.max(), cols.max()) >= n:
        raise ShapeError("pair indices exceed patch length")
    runs = _runs_for(rows, cols)
    out = np.empty(patches.shape[:-2] + (rows.size, patches.shape[-1]), dtype=patches.dtype)
    for i, j0, j1, k in runs:
        # one row of the triangle: x_i times the contiguous block x_j0 .. x_j1-1
        np.multiply(patches[..., i : i + 1, :], patches[..., j0:j1, :], out=out[..., k : k + j1 - j0, :])
    return out


def _runs_for(rows, cols):
    return _runs(np.asarray(rows, dtype=np.intp).tobytes(), np.asarray(cols, dtype=np.intp).tobytes())


@lru_cache(maxsize=64)
def _runs(rows_bytes: bytes, cols_bytes: bytes):
    """Split a row-sorted pair list into ``(i, j0, j1, offset)`` runs of contiguous columns."""
    rows = np.frombuffer(rows_bytes, dtype=np.intp)
    cols = np.frombuffer(cols_bytes, dtype=np.intp)
    runs, k = [], 0
    while k < rows.size:
        i, j0 = int(rows[k]), int(cols[k])
        end = k
        while end + 1 < rows.size and rows[end + 1] == i and cols[end + 1] == cols[end] + 1:
            end += 1
        runs.append((i, j0, int(cols[end]) + 1, k))
        k = end + 1
    return tuple(runs)


def _chunks(total: int, per_column: int):
    step = max(1, _CHUNK_ELEMS // max(per_column, 1))
    for start in range(0, total, step):
        yield slice(start, min(total, start + step))


def _check_grad(x: np.ndarray, grad: np.ndarray, geom: ConvGeometry) -> None:
    ho, wo = geom.output_hw(x.shape[2], x.shape[3])
    expect = (x.shape[0], geom.out_channels, ho, wo)
    if grad.shape != expect:
        raise ShapeError(f"upstream gradient shape {grad.shape} != {expect}")


def patch_matrix(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """All patches of a batch side by side: ``(n, N*Ho*Wo)``, sample-major columns."""
    cols = im2col_batch(x, geom)
    return np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(geom.n, -1)


def _to_batch(flat: np.ndarray, n_samples: int, channels: int, ho: int, wo: int) -> np.ndarray:
    # (C, N*L) -> (N, C, Ho, Wo)
    return np.ascontiguousarray(flat.reshape(channels, n_samples, ho * wo).transpose(1, 0, 2)).reshape(
        n_samples, channels, ho, wo
    )


def _to_flat(t: np.ndarray) -> np.ndarray:
    # (N, C, Ho, Wo) -> (C, N*L)
    N, C = t.shape[:2]
    return np.ascontiguousarray(t.reshape(N, C, -1).transpose(1, 0, 2)).reshape(C, -1)


def _fold(dcols: np.ndarray, geom: ConvGeometry, x_shape) -> np.ndarray:
    N, _, H, W = x_shape
    ho, wo = geom.output_hw(H, W)
    batched = np.ascontiguousarray(dcols.reshape(geom.n, N, ho * wo).transpose(1, 0, 2))
    return col2im_batch(batched, geom, (H, W))


def linear_forward(x: np.ndarray, filters: LinearFilterBank, cols: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation of ``x`` with the bank via im2col and one GEMM.

    ``cols`` may carry a precomputed :func:`patch_matrix` of ``x``.
    """
    geom = filters.geom
    if cols is None:
        cols = patch_matrix(x, geom)
    ho, wo = geom.output_hw(x.shape[2], x.shape[3])
    y = filters.w1 @ cols
    y += filters.bias[:, None]
    return _to_batch(y, x.shape[0], geom.out_channels, ho, wo)


def volterra_forward(x: np.ndarray, filters: VolterraFilterBank, cols: np.ndarray | None = None) -> np.ndarray:
    geom = filters.geom
    if cols is None:
        cols = patch_matrix(x, geom)
    ho, wo = geom.output_hw(x.shape[2], x.shape[3])
    pairs = filters.pairs
    y = filters.w1 @ cols
    for sl in _chunks(cols.shape[1], pairs[0].size):
        y[:, sl] += filters.w2 @ quad2col(cols[:, sl], pairs)
    y += filters.bias[:, None]
    return _to_batch(y, x.shape[0], geom.out_channels, ho, wo)


def volterra_backward_weights(
    x: np.ndarray,
    upstream_grad: np.ndarray,
    geom: ConvGeometry,
    interaction: str = "cross",
    cols: np.ndarray | None = None,
):
    """Return ``(dE/dw1, dE/dw2, dE/dbias)`` summed over the batch."""
    _check_grad(x, upstream_grad, geom)
    if cols is None:
        cols = patch_matrix(x, geom)
    pairs = pair_indices(geom, interaction)
    g = _to_flat(upstream_grad)
    dw1 = g @ cols.T
    dw2 = np.zeros((geom.out_channels, pairs[0].size), dtype=dw1.dtype)
    for sl in _chunks(cols.shape[1], pairs[0].size):
        dw2 += g[:, sl] @ quad2col(cols[:, sl], pairs).T
    db = g.sum(axis=1)
    return dw1, dw2, db


def volterra_backward_input(
    x: np.ndarray,
    upstream_grad: np.ndarray,
    filters: VolterraFilterBank,
    cols: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the loss with respect to the layer input.

    Per patch, ``dy/dx_i = w1[i] + sum_{k<=i} w2[k,i] x_k + sum_{k>=i} w2[i,k] x_k``,
    so the diagonal weight enters twice. Unlike the linear case this depends
    on the patch itself, so it is formed for every output location, weighted
    by the upstream gradient and folded back with col2im.
    """
    geom = filters.geom
    _check_grad(x, upstream_grad, geom)
    if cols is None:
        cols = patch_matrix(x, geom)
    rows, cpairs = filters.pairs
    runs = _runs_for(rows, cpairs)
    g = _to_flat(upstream_grad)
    dcols = filters.w1.T @ g
    w2t = np.ascontiguousarray(filters.w2.T)
    for sl in _chunks(cols.shape[1], rows.size):
        # upstream-weighted packed coefficients, one column per location
        coef = w2t @ g[:, sl]
        xs = cols[:, sl]
        out = dcols[:, sl]
        for i, j0, j1, k in runs:
            block = coef[k : k + j1 - j0]
            # d(x_i x_j)/dx_i = x_j and d(x_i x_j)/dx_j = x_i; for j == i both fire, giving 2 x_i
            out[i] += np.einsum("jm,jm->m", block, xs[j0:j1])
            out[j0:j1] += block * xs[i]
    return _fold(dcols, geom, x.shape)


def linear_backward(
    x: np.ndarray,
    upstream_grad: np.ndarray,
    filters: LinearFilterBank,
    cols: np.ndarray | None = None,
):
    """Return ``(dE/dw1, dE/dbias, dE/dx)``."""
    geom = filters.geom
    _check_grad(x, upstream_grad, geom)
    if cols is None:
        cols = patch_matrix(x, geom)
    g = _to_flat(upstream_grad)
    dw1 = g @ cols.T
    db = g.sum(axis=1)
    dx = _fold(filters.w1.T @ g, geom, x.shape)
    return dw1, db, dx


_COUNT_LIMIT = 2**63 - 1


def volterra_param_count(n: int, r: int) -> int:
    """Number of monomials of degree <= r in n variables, i.e. C(n + r, r).

    Computed multiplicatively; results beyond a signed 64-bit integer raise
    ``OverflowError``.
    """
    if n < 1 or r < 0:
        raise ValueError(f"need n >= 1 and r >= 0, got n={n}, r={r}")
    k = min(n, r)
    total = 1
    for i in range(1, k + 1):
        total = total * (n + r - k + i) // i
        if total > _COUNT_LIMIT:
            raise OverflowError(f"C({n + r}, {r}) exceeds 64-bit range")
    return total


def unpack_upper(w2: np.ndarray, n: int, pairs: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Expand packed weights to a full upper-triangular matrix (test/analysis helper).

    Works on a single vector ``(P,)`` or a bank ``(O, P)``.
    """
    rows, cols = pairs if pairs is not None else _pairs(n, 0)
    w2 = np.asarray(w2)
    out = np.zeros(w2.shape[:-1] + (n, n), dtype=w2.dtype)
    out[..., rows, cols] = w2
    return out


def pack_upper(mat: np.ndarray, pairs: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Read the upper triangle of ``mat`` (..., n, n) in packed order."""
    mat = np.asarray(mat)
    rows, cols = pairs if pairs is not None else _pairs(mat.shape[-1], 0)
    return mat[..., rows, cols]


def symmetrize(w2: np.ndarray, n: int, pairs: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Symmetric matrix ``(W + W^T)/2`` with the same quadratic form as packed ``w2``."""
    upper = unpack_upper(w2, n, pairs)
    return 0.5 * (upper + np.swapaxes(upper, -1, -2))


def pack_symmetric(sym: np.ndarray, pairs: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Packed weights whose quadratic form equals ``x^T sym x`` for symmetric ``sym``.

    Off-diagonal pairs carry ``2*sym[i, j]`` because each unordered pair is
    stored once.
    """
    sym = np.asarray(sym)
    rows, cols = pairs if pairs is not None else _pairs(sym.shape[-1], 0)
    return np.where(rows == cols, 1.0, 2.0) * sym[..., rows, cols]
