"""Forward/backward semantics of the binarized layer kinds.

Quantized layers keep real-valued *latent* weights and see ``sign(latent)`` in
the forward pass. Gradients flow through ``sign`` with the clipped
straight-through estimator: the incoming gradient is passed where
``|x| <= 1`` and zeroed elsewhere.

Every layer caches what it needs during ``forward(..., training=True)`` and
``backward`` consumes that cache. Passing ``quantized=False`` turns a
quantized layer into its plain real-valued analogue, which is what the
gradient checks differentiate numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeMismatchError,
    col2im,
    conv2d,
    im2col,
    pool_out_dims,
)

STE_CLIP = 1.0
BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


def sign_forward(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with ``sign(0) = +1``."""
    x = np.asarray(x)
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype if x.dtype.kind == "f" else np.float32)


def ste_mask(x: np.ndarray, clip: float = STE_CLIP) -> np.ndarray:
    return (np.abs(x) <= clip).astype(x.dtype if x.dtype.kind == "f" else np.float32)


def sign_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.shape != upstream.shape:
        raise ShapeMismatchError(f"sign_backward: {x.shape} vs {upstream.shape}")
    return upstream * ste_mask(x)


@dataclass
class Param:
    """A trainable array and its gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    # latent weights of quantized layers are clipped to [-1, 1] after each update
    clip: bool = False

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)


class Layer:
    kind = "layer"

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class QConv(Layer):
    """Bias-free VALID conv with sign-binarized weights.

    The first layer of a network consumes real pixels (``binarize_input=False``)
    but its weights are still binarized.
    """

    kind = "qconv"

    def __init__(self, weights: np.ndarray, binarize_input: bool = True, quantized: bool = True):
        weights = np.asarray(weights)
        if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
            raise ShapeMismatchError(f"conv weights must be [K,K,Cin,F], got {weights.shape}")
        self.weight = Param("weight", np.array(weights), clip=quantized)
        self.binarize_input = binarize_input
        self.quantized = quantized
        self._cache = None

    @property
    def kernel(self) -> int:
        return self.weight.value.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.value.shape[2]

    @property
    def filters(self) -> int:
        return self.weight.value.shape[3]

    def params(self):
        return [self.weight]

    def effective_weights(self) -> np.ndarray:
        w = self.weight.value
        return sign_forward(w) if self.quantized else w

    def _effective_input(self, x):
        return sign_forward(x) if (self.quantized and self.binarize_input) else x

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeMismatchError(
                f"qconv expects [N,H,W,{self.in_channels}] input, got {x.shape}"
            )
        xin = self._effective_input(x)
        wq = self.effective_weights()
        # real-valued first-layer inputs are summed exactly; +-1 products are integers anyway
        out = conv2d(xin, wq, exact=self.quantized and not self.binarize_input)
        if training:
            self._cache = (x, xin, wq)
        return out

    def backward(self, upstream):
        x, xin, wq = self._cache
        k = self.kernel
        gy = upstream.reshape(-1, self.filters)
        cols = im2col(xin, k)
        grad_wq = (cols.T @ gy).reshape(wq.shape)
        w = self.weight.value
        self.weight.grad[...] = grad_wq * ste_mask(w) if self.quantized else grad_wq
        grad_cols = gy @ wq.reshape(-1, self.filters).T
        grad_xin = col2im(grad_cols, x.shape, k)
        if self.quantized and self.binarize_input:
            return sign_backward(x, grad_xin)
        return grad_xin


class QDense(Layer):
    """Bias-free dense layer with sign-binarized weights ``[In, Units]``.

    The output layer (``is_output``) emits raw logits; no sign follows it.
    """

    kind = "qdense"

    def __init__(self, weights: np.ndarray, binarize_input: bool = True,
                 is_output: bool = False, quantized: bool = True):
        weights = np.asarray(weights)
        if weights.ndim != 2:
            raise ShapeMismatchError(f"dense weights must be [In,Units], got {weights.shape}")
        self.weight = Param("weight", np.array(weights), clip=quantized)
        self.binarize_input = binarize_input
        self.is_output = is_output
        self.quantized = quantized
        self._cache = None

    @property
    def in_features(self) -> int:
        return self.weight.value.shape[0]

    @property
    def units(self) -> int:
        return self.weight.value.shape[1]

    def params(self):
        return [self.weight]

    def effective_weights(self) -> np.ndarray:
        w = self.weight.value
        return sign_forward(w) if self.quantized else w

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatchError(
                f"qdense expects [N,{self.in_features}] input, got {x.shape}"
            )
        xin = sign_forward(x) if (self.quantized and self.binarize_input) else x
        wq = self.effective_weights()
        if training:
            self._cache = (x, xin, wq)
        return xin @ wq.astype(xin.dtype, copy=False)

    def backward(self, upstream):
        x, xin, wq = self._cache
        grad_wq = xin.T @ upstream
        w = self.weight.value
        self.weight.grad[...] = grad_wq * ste_mask(w) if self.quantized else grad_wq
        grad_xin = upstream @ wq.T
        if self.quantized and self.binarize_input:
            return sign_backward(x, grad_xin)
        return grad_xin


class MaxPool(Layer):
    """Non-overlapping 2x2 max pooling; odd trailing rows/columns are dropped."""

    kind = "maxpool"

    def __init__(self):
        self._cache = None

    def forward(self, x, training=False):
        out, idx = maxpool_forward(x)
        if training:
            self._cache = (x.shape, idx)
        return out

    def backward(self, upstream):
        shape, idx = self._cache
        return maxpool_backward(idx, upstream, shape)


def _windows(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    oh, ow = pool_out_dims(h, w)
    v = x[:, :2 * oh, :2 * ow, :].reshape(n, oh, 2, ow, 2, c)
    # window order is row-major: (0,0), (0,1), (1,0), (1,1)
    return v.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, 4)


def maxpool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return the pooled tensor and the argmax slot (0..3) of every window.

    Ties go to the first maximum in row-major window order.
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"maxpool expects [N,H,W,C], got {x.shape}")
    win = _windows(x)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool_backward(idx: np.ndarray, upstream: np.ndarray, input_shape) -> np.ndarray:
    n, h, w, c = input_shape
    oh, ow = idx.shape[1], idx.shape[2]
    if upstream.shape != idx.shape:
        raise ShapeMismatchError(f"maxpool_backward: {upstream.shape} vs {idx.shape}")
    slots = np.zeros(idx.shape + (4,), dtype=upstream.dtype)
    np.put_along_axis(slots, idx[..., None], upstream[..., None], axis=-1)
    slots = slots.reshape(n, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    grad = np.zeros((n, h, w, c), dtype=upstream.dtype)
    grad[:, :2 * oh, :2 * ow, :] = slots.reshape(n, 2 * oh, 2 * ow, c)
    return grad


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis but the last.

    Inference uses the folded affine form ``y = x * scale + shift`` with
    ``scale = gamma / sqrt(moving_var + eps)`` and
    ``shift = beta - moving_mean * scale``, all in float32. The deployment
    engine reproduces exactly this arithmetic.
    """

    kind = "batchnorm"

    def __init__(self, channels: int, epsilon: float = BN_EPSILON, momentum: float = BN_MOMENTUM,
                 dtype=np.float32):
        if channels < 1:
            raise ValueError(f"batchnorm needs >= 1 channel, got {channels}")
        self.channels = channels
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = Param("gamma", np.ones(channels, dtype=dtype))
        self.beta = Param("beta", np.zeros(channels, dtype=dtype))
        self.moving_mean = np.zeros(channels, dtype=dtype)
        self.moving_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def inference_affine(self) -> tuple[np.ndarray, np.ndarray]:
        dt = self.gamma.value.dtype
        eps = dt.type(self.epsilon)
        scale = (self.gamma.value / np.sqrt(self.moving_var + eps)).astype(dt)
        shift = (self.beta.value - self.moving_mean * scale).astype(dt)
        return scale, shift

    def forward(self, x, training=False):
        if x.shape[-1] != self.channels:
            raise ShapeMismatchError(
                f"batchnorm expects {self.channels} channels, got {x.shape[-1]}"
            )
        if not training:
            scale, shift = self.inference_affine()
            return x * scale + shift
        if x.shape[0] < 2:
            raise ValueError("batchnorm in training mode needs a batch of at least 2")
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv_std
        m = self.momentum
        self.moving_mean[...] = m * self.moving_mean + (1 - m) * mean
        self.moving_var[...] = m * self.moving_var + (1 - m) * var
        self._cache = (xhat, inv_std, axes)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, upstream):
        xhat, inv_std, axes = self._cache
        count = xhat.size // self.channels
        self.gamma.grad[...] = (upstream * xhat).sum(axis=axes)
        self.beta.grad[...] = upstream.sum(axis=axes)
        g = upstream * self.gamma.value
        return (inv_std / count) * (
            count * g - g.sum(axis=axes) - xhat * (g * xhat).sum(axis=axes)
        )


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def forward(self, x, training=False):
        if training:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream):
        return upstream.reshape(self._shape)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatchError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype, copy=False)
