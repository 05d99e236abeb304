"""Dense tensor helpers and the numeric kernels used by the network.

Tensors are plain ``numpy.ndarray`` objects. Storage is float32 in row-major
order with images laid out channel-major as ``[C, H, W]``; reductions
accumulate in float64 and the public kernels round back to float32.

Every public kernel accepts a single sample (``[C, H, W]`` or ``[D]``). The
``*_batch`` variants take a leading batch axis, return float64, and are what
the forward pass and the trainer use.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """A kernel received operands whose shapes do not line up."""


def tensor(data, shape=None) -> np.ndarray:
    """Build a float32 tensor, optionally reshaping flat row-major ``data``."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape dimensions must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"shape {shape} needs {int(np.prod(shape))} values, got {arr.size}")
        arr = arr.reshape(shape)
    return np.ascontiguousarray(arr)


def _check_rank(x: np.ndarray, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {tuple(x.shape)}")


# -- convolution -------------------------------------------------------------

def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_batch(x, kernels, bias, stride=1, pad=0) -> np.ndarray:
    """Cross-correlation of ``x[N, C_in, H, W]`` with ``kernels[C_out, C_in, kh, kw]``."""
    _check_rank(x, 4, "input batch")
    _check_rank(kernels, 4, "kernels")
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise ShapeError(f"input channels: kernels expect C_in={k_in}, input has C_in={c_in}")
    if np.shape(bias) != (c_out,):
        raise ShapeError(f"bias length must equal C_out={c_out}, got shape {np.shape(bias)}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"stride must be >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if kh > h + 2 * pad:
        raise ShapeError(f"kernel height kh={kh} exceeds padded input height {h + 2 * pad}")
    if kw > w + 2 * pad:
        raise ShapeError(f"kernel width kw={kw} exceeds padded input width {w + 2 * pad}")
    win = _windows(np.asarray(x, dtype=np.float64), kh, kw, stride, pad)
    out = np.tensordot(win, np.asarray(kernels, dtype=np.float64), axes=([1, 4, 5], [1, 2, 3]))
    out += np.asarray(bias, dtype=np.float64)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(dout, x, kernels, stride=1, pad=0):
    """Gradients of :func:`conv2d_batch` w.r.t. input, kernels and bias."""
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    win = _windows(x, kh, kw, stride, pad)
    dk = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    # scatter each kernel tap back onto the padded input grid
    dcols = np.tensordot(dout, kernels, axes=([1], [0]))  # [N, H', W', C_in, kh, kw]
    dxp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad))
    ho, wo = dout.shape[2], dout.shape[3]
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return dx, dk, db


def conv2d(input, kernels, bias, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Zero-padded 2-D cross-correlation of a ``[C_in, H, W]`` tensor (no kernel flip).

    Output size per spatial axis is ``floor((H + 2*pad - kh) / stride) + 1``.
    """
    x = np.asarray(input)
    _check_rank(x, 3, "input")
    return conv2d_batch(x[None], np.asarray(kernels), np.asarray(bias), stride, pad)[0].astype(DTYPE)


# -- pointwise ---------------------------------------------------------------

def relu(input) -> np.ndarray:
    return np.maximum(np.asarray(input), 0).astype(DTYPE, copy=False)


# -- pooling -----------------------------------------------------------------

def _check_pool(h: int, w: int, k: int, stride: int) -> None:
    if k <= 0 or stride <= 0:
        raise ShapeError(f"pool size and stride must be positive, got k={k}, stride={stride}")
    if k > h or k > w:
        raise ShapeError(f"pool size k={k} exceeds input {h}x{w}")


def maxpool2d_batch(x, k: int, stride: int) -> np.ndarray:
    _check_rank(x, 4, "input batch")
    _check_pool(x.shape[2], x.shape[3], k, stride)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


def maxpool2d_backward(dout, x, k: int, stride: int) -> np.ndarray:
    """Route each pooled gradient to the first maximal element of its window."""
    n, c, h, w = x.shape
    ho, wo = dout.shape[2], dout.shape[3]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    di, dj = np.divmod(arg, k)
    rows = di + (np.arange(ho) * stride)[None, None, :, None]
    cols = dj + (np.arange(wo) * stride)[None, None, None, :]
    dx = np.zeros_like(x, dtype=np.float64)
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dx, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), dout)
    return dx


def maxpool2d(input, k: int, stride: int) -> np.ndarray:
    x = np.asarray(input)
    _check_rank(x, 3, "input")
    return maxpool2d_batch(x[None], k, stride)[0].astype(DTYPE)


# -- fully connected ---------------------------------------------------------

def affine_batch(x, weight, bias) -> np.ndarray:
    _check_rank(x, 2, "input batch")
    _check_rank(weight, 2, "weight")
    d_out, d_in = weight.shape
    if x.shape[1] != d_in:
        raise ShapeError(f"input length D_in={x.shape[1]} does not match weight D_in={d_in}")
    if np.shape(bias) != (d_out,):
        raise ShapeError(f"bias length must equal D_out={d_out}, got shape {np.shape(bias)}")
    return np.asarray(x, dtype=np.float64) @ np.asarray(weight, dtype=np.float64).T + np.asarray(
        bias, dtype=np.float64
    )


def affine(input, weight, bias) -> np.ndarray:
    """``weight @ input + bias`` for a single vector."""
    x = np.asarray(input)
    _check_rank(x, 1, "input")
    return affine_batch(x[None], np.asarray(weight), np.asarray(bias))[0].astype(DTYPE)


# -- softmax -----------------------------------------------------------------

def softmax_batch(x) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(input) -> np.ndarray:
    x = np.asarray(input)
    _check_rank(x, 1, "input")
    return softmax_batch(x).astype(DTYPE)
