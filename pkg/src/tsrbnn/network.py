"""Trainable model built from an :class:`~tsrbnn.arch.ArchSpec`."""

from __future__ import annotations

import numpy as np

from .arch import ArchSpec, BatchNormSpec, DenseSpec, IN_CHANNELS, MaxPoolSpec, QConvSpec, \
    infer_shapes
from .layers import BN_EPSILON, BN_MOMENTUM, BatchNorm, Flatten, Layer, MaxPool, Param, QConv, \
    QDense
from .tensor import ShapeMismatchError

INIT_SCALE = 0.1


class Model:
    """Sequential binarized network.

    ``layers`` mirrors ``arch.layers`` one to one, except for the implicit
    :class:`Flatten` inserted before the first dense layer.
    """

    def __init__(self, arch: ArchSpec, layers: list[Layer], metadata: dict | None = None):
        self.arch = arch
        self.layers = layers
        self.metadata = dict(metadata or {})

    @property
    def input_size(self) -> int:
        return self.arch.input_size

    @property
    def classes(self) -> int:
        return self.arch.classes

    def parameters(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def batchnorms(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x)
        if x.dtype not in (np.float32, np.float64):
            x = x.astype(np.float32)
        expected = (self.input_size, self.input_size, IN_CHANNELS)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != expected:
            raise ShapeMismatchError(f"model expects images of shape {expected}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference-mode logits (moving BN statistics), evaluated in batches."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        out = [self.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(images), axis=1)


def build_model(arch: ArchSpec, rng: np.random.Generator | None = None, *,
                quantized: bool = True, dtype=np.float32,
                bn_epsilon: float = BN_EPSILON, bn_momentum: float = BN_MOMENTUM) -> Model:
    """Instantiate layers for ``arch`` with latent weights ~ U(-1, 1) * 0.1."""
    rng = rng if rng is not None else np.random.default_rng(0)
    shapes = infer_shapes(arch)
    prev = (arch.input_size, arch.input_size, IN_CHANNELS)
    layers: list[Layer] = []
    first = True
    n = len(arch.layers)
    for i, (spec, shape) in enumerate(zip(arch.layers, shapes)):
        if isinstance(spec, QConvSpec):
            w = rng.uniform(-1, 1, size=(spec.kernel, spec.kernel, prev[2], spec.filters))
            layers.append(QConv((w * INIT_SCALE).astype(dtype), binarize_input=not first,
                                quantized=quantized))
            first = False
        elif isinstance(spec, MaxPoolSpec):
            layers.append(MaxPool())
        elif isinstance(spec, BatchNormSpec):
            layers.append(BatchNorm(prev[-1], bn_epsilon, bn_momentum, dtype=dtype))
        elif isinstance(spec, DenseSpec):
            if len(prev) == 3:
                layers.append(Flatten())
                prev = (int(np.prod(prev)),)
            w = rng.uniform(-1, 1, size=(prev[0], spec.units))
            layers.append(QDense((w * INIT_SCALE).astype(dtype), binarize_input=True,
                                 is_output=(i == n - 1), quantized=quantized))
        prev = shape
    meta = {"bn_epsilon": bn_epsilon, "bn_momentum": bn_momentum, "ste_clip": 1.0,
            "init": f"uniform(-1,1)*{INIT_SCALE}", "normalization": "div255"}
    return Model(arch, layers, meta)


def spec_layers(model: Model) -> list[Layer]:
    """Model layers aligned with ``model.arch.layers`` (the implicit flatten removed)."""
    return [layer for layer in model.layers if not isinstance(layer, Flatten)]
