"""Dense tensor helpers shared by the training and deployment paths.

Tensors are plain :class:`numpy.ndarray` objects. Images use the channel-last
layout ``[N, H, W, C]``, matrices ``[N, F]``. Every convolution in this package
is VALID with stride 1 and every pooling window is a non-overlapping 2x2.
"""

from __future__ import annotations

import numpy as np

IMAGE_RANK = 4
MATRIX_RANK = 2


class DimensionError(ValueError):
    """Raised when a spatial dimension is too small for the requested op."""


class ShapeMismatchError(ValueError):
    """Raised when two operands disagree on shape."""


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Return a contiguous array, validating rank and non-empty dims."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim not in (1, MATRIX_RANK, IMAGE_RANK):
        raise ShapeMismatchError(f"tensor rank must be 1, 2 or 4, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise ShapeMismatchError(f"all dimensions must be >= 1, got {arr.shape}")
    return arr


def conv_out_dims(in_h: int, in_w: int, k: int) -> tuple[int, int]:
    if k < 1:
        raise DimensionError(f"kernel size must be >= 1, got {k}")
    if in_h < k or in_w < k:
        raise DimensionError(f"input {in_h}x{in_w} is smaller than kernel {k}x{k}")
    return in_h - k + 1, in_w - k + 1


def pool_out_dims(in_h: int, in_w: int) -> tuple[int, int]:
    if in_h < 2 or in_w < 2:
        raise DimensionError(f"input {in_h}x{in_w} is too small for 2x2 pooling")
    return in_h // 2, in_w // 2


def _require_image(x: np.ndarray) -> None:
    if x.ndim != IMAGE_RANK:
        raise ShapeMismatchError(f"expected an [N,H,W,C] tensor, got shape {x.shape}")


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Lower an image batch to patch rows.

    Row ``(n, oy, ox)`` holds the ``k x k x C`` patch anchored at ``(oy, ox)``
    flattened in ``(kh, kw, c)`` order, so a convolution becomes
    ``im2col(x, k) @ w.reshape(k * k * C, F)``.
    """
    _require_image(x)
    n, h, w, c = x.shape
    oh, ow = conv_out_dims(h, w, k)
    cols = np.empty((n, oh, ow, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = x[:, i:i + oh, j:j + ow, :]
    return cols.reshape(n * oh * ow, k * k * c)


def col2im(cols: np.ndarray, input_shape: tuple[int, ...], k: int) -> np.ndarray:
    """Scatter-add patch rows back onto an image (adjoint of :func:`im2col`)."""
    n, h, w, c = input_shape
    oh, ow = conv_out_dims(h, w, k)
    if cols.shape != (n * oh * ow, k * k * c):
        raise ShapeMismatchError(
            f"columns of shape {cols.shape} do not match input {tuple(input_shape)} with k={k}"
        )
    patches = cols.reshape(n, oh, ow, k, k, c)
    out = np.zeros((n, h, w, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + oh, j:j + ow, :] += patches[:, :, :, i, j, :]
    return out


def conv2d(x: np.ndarray, w: np.ndarray, exact: bool = False) -> np.ndarray:
    """VALID, stride-1 convolution of ``x [N,H,W,C]`` with ``w [K,K,C,F]``.

    With ``exact=True`` float32 operands are accumulated in float64 and
    rounded once. For inputs of bounded dynamic range (normalized 8-bit
    pixels, +-1 weights) the float64 sum is exact, so the result does not
    depend on BLAS summation order.
    """
    _require_image(x)
    k, k2, cin, f = w.shape
    if k != k2:
        raise ShapeMismatchError(f"only square kernels are supported, got {w.shape[:2]}")
    if x.shape[3] != cin:
        raise ShapeMismatchError(f"input has {x.shape[3]} channels, kernel expects {cin}")
    n, h, wd, _ = x.shape
    oh, ow = conv_out_dims(h, wd, k)
    cols = im2col(x, k)
    w2 = w.reshape(k * k * cin, f)
    if exact and x.dtype == np.float32:
        out = (cols.astype(np.float64) @ w2.astype(np.float64)).astype(np.float32)
    else:
        out = cols @ w2.astype(x.dtype, copy=False)
    return out.reshape(n, oh, ow, f)


def conv2d_direct(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Nested-loop reference convolution; accumulates (kh, kw, c) ascending in float64."""
    n, h, wd, cin = x.shape
    k = w.shape[0]
    f = w.shape[3]
    oh, ow = conv_out_dims(h, wd, k)
    xd = x.astype(np.float64)
    wdd = w.astype(np.float64)
    out = np.zeros((n, oh, ow, f), dtype=np.float64)
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                for fo in range(f):
                    acc = 0.0
                    for i in range(k):
                        for j in range(k):
                            for ch in range(cin):
                                acc += xd[b, oy + i, ox + j, ch] * wdd[i, j, ch, fo]
                    out[b, oy, ox, fo] = acc
    return out.astype(x.dtype)
