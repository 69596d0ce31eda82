"""Dense NCHW arrays and the two kernels every convolution reduces to.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out row-major as
(batch, channel, height, width). ``float32`` is the production dtype and
``float64`` is the mirror used by gradient checks.

Both kernels fix the summation order: every output element of :func:`gemm`
is accumulated over the inner dimension in ascending order, with no fused
multiply-add, so results are reproducible bit for bit.
"""
from __future__ import annotations

import numba
import numpy as np

from .errors import ShapeError

FLOAT = np.float32
DOUBLE = np.float64


def as_tensor(data, dtype=FLOAT) -> np.ndarray:
    """Return ``data`` as a C-contiguous rank-4 array of ``dtype``."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
    return arr


def zeros(n: int, c: int, h: int, w: int, dtype=FLOAT) -> np.ndarray:
    if min(n, c, h, w) < 0:
        raise ShapeError(f"negative tensor shape {(n, c, h, w)}")
    return np.zeros((n, c, h, w), dtype=dtype)


def flat_index(shape, n: int, c: int, h: int, w: int) -> int:
    """Row-major offset of (n, c, h, w) inside a tensor of ``shape``."""
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


def unflat_index(shape, index: int):
    _, C, H, W = shape
    index, w = divmod(index, W)
    index, h = divmod(index, H)
    n, c = divmod(index, C)
    return n, c, h, w


@numba.njit(cache=True)
def _gemm_kernel(a, b, c):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                c[i, j] += aip * b[p, j]


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` with p-ascending accumulation per element.

    Args:
        a: matrix of shape (m, k).
        b: matrix of shape (k, n).

    Returns:
        (m, n) matrix in the common dtype of the inputs.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm shape mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    if dtype not in (np.float32, np.float64):
        dtype = np.dtype(np.float64)
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    c = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    if c.size and a.shape[1]:
        _gemm_kernel(a, b, c)
    return c


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Spatial output length of a convolution with symmetric padding ``pad``."""
    return (size + 2 * pad - kernel) // stride + 1


@numba.njit(cache=True)
def _im2col_kernel(x, kernel, stride, pad, oh, ow, cols):
    n, c, h, w = x.shape
    for ch in range(c):
        for ki in range(kernel):
            for kj in range(kernel):
                row = (ch * kernel + ki) * kernel + kj
                for b in range(n):
                    for oy in range(oh):
                        iy = oy * stride - pad + ki
                        base = (b * oh + oy) * ow
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * stride - pad + kj
                            if ix >= 0 and ix < w:
                                cols[row, base + ox] = x[b, ch, iy, ix]


@numba.njit(cache=True)
def _col2im_kernel(cols, kernel, stride, pad, oh, ow, out):
    n, c, h, w = out.shape
    for ch in range(c):
        for ki in range(kernel):
            for kj in range(kernel):
                row = (ch * kernel + ki) * kernel + kj
                for b in range(n):
                    for oy in range(oh):
                        iy = oy * stride - pad + ki
                        base = (b * oh + oy) * ow
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * stride - pad + kj
                            if ix >= 0 and ix < w:
                                out[b, ch, iy, ix] += cols[row, base + ox]


def _check_geometry(h, w, kernel, stride, pad):
    if kernel < 1 or stride < 1 or pad < 0:
        raise ShapeError(f"invalid geometry kernel={kernel} stride={stride} pad={pad}")
    oh = conv_output_size(h, kernel, stride, pad)
    ow = conv_output_size(w, kernel, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"non-positive output size {oh}x{ow} for input {h}x{w}, "
            f"kernel={kernel} stride={stride} pad={pad}"
        )
    return oh, ow


def im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Unfold receptive fields into columns.

    Row ``(c*kernel + ki)*kernel + kj`` and column ``(b*h_out + oy)*w_out + ox``
    hold ``x[b, c, oy*stride - pad + ki, ox*stride - pad + kj]``; padding reads
    as zero. A batch of ``n`` images yields ``n`` column blocks side by side.
    """
    x = np.asarray(x)
    x = as_tensor(x, dtype=x.dtype if x.dtype in (np.float32, np.float64) else FLOAT)
    n, c, h, w = x.shape
    oh, ow = _check_geometry(h, w, kernel, stride, pad)
    cols = np.zeros((c * kernel * kernel, n * oh * ow), dtype=x.dtype)
    if cols.size:
        _im2col_kernel(x, kernel, stride, pad, oh, ow, cols)
    return cols


def col2im(cols: np.ndarray, shape, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into a tensor of ``shape``."""
    n, c, h, w = shape
    oh, ow = _check_geometry(h, w, kernel, stride, pad)
    if cols.shape != (c * kernel * kernel, n * oh * ow):
        raise ShapeError(f"col2im got {cols.shape} for tensor shape {tuple(shape)}")
    out = np.zeros(shape, dtype=cols.dtype)
    if cols.size:
        _col2im_kernel(np.ascontiguousarray(cols), kernel, stride, pad, oh, ow, out)
    return out
