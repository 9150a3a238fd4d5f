"""Spatial primitives: convolutions, transposed conv, 2x2 max pooling.

All operate on NCHW tensors, stride 1 with same padding except the
stride-2 transposed conv and the pool. Each primitive carries its own
vector-Jacobian closure so it plugs into the tape like any elementwise op.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _op

__all__ = [
    "conv2d_same",
    "depthwise_conv2d_same",
    "conv_transpose_2x2",
    "maxpool2x2",
]


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    """Same-padded (N,C,H,W,k,k) sliding windows of an NCHW array."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d_same(x: Tensor, kernel: Tensor) -> Tensor:
    """Cross-correlation with kernel [C_out, C_in, k, k], stride 1, same padding.

    im2col + one GEMM; the backward reuses the column matrix and scatters
    dL/dx back with col2im (k*k vectorized slice adds).
    """
    n, c, h, w = x.shape
    co, ci, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d_same needs odd square kernels, got {kernel.shape}")
    if ci != c:
        raise ShapeError(f"conv2d_same channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    # columns: [N*H*W, C*k*k]
    cols = np.ascontiguousarray(
        _windows(x.data, k).transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * k * k)
    kmat = kernel.data.reshape(co, c * k * k)
    data = (cols @ kmat.T).reshape(n, h, w, co).transpose(0, 3, 1, 2)

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, co)
        gx = None
        if x._tracked():
            gcols = (gmat @ kmat).reshape(n, h, w, c, k, k)
            p = k // 2
            gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + h, j:j + w] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        gk = None
        if kernel._tracked():
            gk = (gmat.T @ cols).reshape(co, c, k, k)
        return gx, gk

    return _op(data, (x, kernel), vjp)


def depthwise_conv2d_same(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel convolution with kernel [C, 1, k, k]; mixes no channels."""
    n, c, h, w = x.shape
    ck, one, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0 or one != 1:
        raise ShapeError(f"depthwise kernel must be [C,1,k,k] with odd k, got {kernel.shape}")
    if ck != c:
        raise ShapeError(f"depthwise channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    win = _windows(x.data, k)
    kern = kernel.data[:, 0]
    data = np.einsum("nchwij,cij->nchw", win, kern, optimize=True)

    def vjp(g):
        gx = None
        if x._tracked():
            gwin = _windows(g, k)
            gx = np.einsum("nchwij,cij->nchw", gwin, np.flip(kern, axis=(1, 2)), optimize=True)
        gk = None
        if kernel._tracked():
            gk = np.einsum("nchwij,nchw->cij", win, g, optimize=True)[:, None]
        return gx, gk

    return _op(data, (x, kernel), vjp)


def conv_transpose_2x2(x: Tensor, kernel: Tensor) -> Tensor:
    """Stride-2 transposed conv with kernel [C_in, C_out, 2, 2]: exact 2x upsample.

    Kernel footprint equals the stride, so output windows never overlap and
    the op is a pure scatter; it is the adjoint of a stride-2 2x2 conv.
    """
    n, c, h, w = x.shape
    ci, co, k, k2 = kernel.shape
    if (k, k2) != (2, 2):
        raise ShapeError(f"conv_transpose_2x2 needs a 2x2 kernel, got {kernel.shape}")
    if ci != c:
        raise ShapeError(f"conv_transpose_2x2 channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    t = np.einsum("nchw,coij->nohiwj", x.data, kernel.data, optimize=True)
    data = t.reshape(n, co, 2 * h, 2 * w)

    def vjp(g):
        gr = g.reshape(n, co, h, 2, w, 2)
        gx = None
        if x._tracked():
            gx = np.einsum("nohiwj,coij->nchw", gr, kernel.data, optimize=True)
        gk = None
        if kernel._tracked():
            gk = np.einsum("nchw,nohiwj->coij", x.data, gr, optimize=True)
        return gx, gk

    return _op(data, (x, kernel), vjp)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient routes to the first max in each window."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {x.shape}")
    r = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = r.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        gx = gf.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _op(data, (x,), vjp)
