"""Lowering a trained :class:`~tsrbnn.network.Model` to XNOR-popcount stages.

Lowering rules, applied to the run of MP/BN layers between two weighted layers
(the next weighted layer binarizes its input):

* the first QConv becomes a ``RealConv`` (real pixels, +-1 weights);
* later QConv/D layers become ``BinConv``/``BinDense`` over packed bits; the
  output D layer is ``BinDense(logits)``;
* the last BN of a run becomes a ``Threshold`` that emits bits; with no BN the
  run ends in a plain ``Sign``;
* MP before that point stays a ``MaxPool`` over pre-activations, MP after it
  becomes a ``BitPool`` (word-level OR); earlier BNs of the run stay as float
  ``RealAffine`` stages.

With ``fuse_pool=True`` the MPs directly in front of the thresholding BN move
behind it as ``BitPool`` (OR for GEQ channels, AND for LEQ channels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..arch import ArchSpec, BatchNormSpec, DenseSpec, MaxPoolSpec, QConvSpec, infer_shapes, \
    IN_CHANNELS
from ..layers import BatchNorm, QConv, QDense, maxpool_forward, sign_forward
from ..network import Model, spec_layers
from ..tensor import ShapeMismatchError, conv2d, im2col
from .bitplane import BitPlane, pack_bits, unpack
from .fold import CONST, GEQ, LEQ, Thresholds, float_thresholds, integer_thresholds
from .kernels import xnor_gemm


class CompileError(ValueError):
    """The model cannot be lowered to the packed engine."""


@dataclass(frozen=True, eq=False)
class RealConvStage:
    weights: BitPlane  # (filters, k*k*cin), rows in (kh, kw, c) order
    kernel: int
    in_channels: int
    layer_index: int
    name = "RealConv"

    @property
    def filters(self) -> int:
        return self.weights.words.shape[0]

    def kernel_tensor(self) -> np.ndarray:
        w = unpack(self.weights)
        return np.ascontiguousarray(
            w.T.reshape(self.kernel, self.kernel, self.in_channels, self.filters))

    def run(self, x):
        return conv2d(np.asarray(x, np.float32), self.kernel_tensor(), exact=True)


@dataclass(frozen=True, eq=False)
class BinaryConvStage:
    weights: BitPlane
    kernel: int
    in_channels: int
    layer_index: int
    name = "BinConv"

    @property
    def filters(self) -> int:
        return self.weights.words.shape[0]

    def run(self, bits):
        n, h, w, _ = bits.shape
        if bits.dtype != bool or bits.shape[3] != self.in_channels:
            raise ShapeMismatchError(f"BinConv expects bool [N,H,W,{self.in_channels}]")
        cols = im2col(bits, self.kernel)
        out = xnor_gemm(pack_bits(cols), self.weights)
        oh, ow = h - self.kernel + 1, w - self.kernel + 1
        return out.reshape(n, oh, ow, self.filters)


@dataclass(frozen=True, eq=False)
class BinaryDenseStage:
    weights: BitPlane  # (units, in_features)
    logits: bool
    layer_index: int

    @property
    def name(self) -> str:
        return "BinDense(logits)" if self.logits else "BinDense"

    def run(self, bits):
        flat = bits.reshape(bits.shape[0], -1)
        if flat.dtype != bool or flat.shape[1] != self.weights.length:
            raise ShapeMismatchError(f"BinDense expects {self.weights.length} input bits")
        return xnor_gemm(pack_bits(flat), self.weights)


@dataclass(frozen=True, eq=False)
class MaxPoolStage:
    layer_index: int
    name = "MaxPool"

    def run(self, x):
        return maxpool_forward(x)[0]


@dataclass(frozen=True, eq=False)
class BitPoolStage:
    """2x2 pooling over bits: OR per channel, AND where ``use_and``."""

    use_and: np.ndarray
    layer_index: int
    name = "BitPool"

    def run(self, bits):
        n, h, w, c = bits.shape
        oh, ow = h // 2, w // 2
        win = bits[:, :2 * oh, :2 * ow, :].reshape(n, oh, 2, ow, 2, c)
        return np.where(self.use_and, win.all(axis=(2, 4)), win.any(axis=(2, 4)))


@dataclass(frozen=True, eq=False)
class ThresholdStage:
    thresholds: Thresholds
    bn_index: int | None  # arch layer index of the folded BN; None for a plain sign

    @property
    def name(self) -> str:
        return "Sign" if self.bn_index is None else "Threshold"

    def run(self, x):
        return self.thresholds.apply(x)


@dataclass(frozen=True, eq=False)
class RealAffineStage:
    scale: np.ndarray
    shift: np.ndarray
    bn_index: int
    name = "RealAffine"

    def run(self, x):
        return np.asarray(x, np.float32) * self.scale + self.shift


@dataclass(eq=False)
class PackedModel:
    arch: ArchSpec
    stages: tuple
    fuse_pool: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def input_size(self) -> int:
        return self.arch.input_size

    @property
    def classes(self) -> int:
        return self.arch.classes

    def trace(self) -> list[str]:
        return [s.name for s in self.stages]

    def forward(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        expected = (self.input_size, self.input_size, IN_CHANNELS)
        if x.shape[1:] != expected:
            raise ShapeMismatchError(f"packed model expects images {expected}, got {x.shape[1:]}")
        for stage in self.stages:
            x = stage.run(x)
        return x

    def logits(self, images, batch_size: int = 256) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        return np.concatenate(
            [self.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        )

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.logits(images), axis=1)


def packed_forward(pm: PackedModel, image) -> np.ndarray:
    return pm.forward(image)


# ---------------------------------------------------------------------------
# planning: what each arch layer lowers to, independent of parameter values


@dataclass(frozen=True)
class StagePlan:
    kind: str  # realconv | binconv | bindense | maxpool | bitpool | threshold | sign | affine
    layer_index: int | None = None
    integer: bool = False  # threshold/sign input is an integer pre-activation
    bound: int = 0  # |pre-activation| bound for integer inputs
    fused: bool = False  # bitpool whose OR/AND mode follows the BN direction
    logits: bool = False


def plan(arch: ArchSpec, fuse_pool: bool = False) -> list[StagePlan]:
    layers = arch.layers
    shapes = infer_shapes(arch)
    steps: list[StagePlan] = []
    prev_shape = (arch.input_size, arch.input_size, IN_CHANNELS)
    i = 0
    n = len(layers)
    while i < n:
        spec = layers[i]
        if isinstance(spec, QConvSpec):
            bound = spec.kernel * spec.kernel * prev_shape[2]
            steps.append(StagePlan("realconv" if i == 0 else "binconv", i))
            integer = i != 0
        elif isinstance(spec, DenseSpec):
            bound = int(np.prod(prev_shape))
            steps.append(StagePlan("bindense", i, logits=(i == n - 1)))
            integer = True
        else:  # pragma: no cover - guaranteed by ArchSpec validation
            raise CompileError(f"layer {i}: {spec} cannot start a block")
        prev_shape = shapes[i]
        i += 1
        run = []
        while i < n and isinstance(layers[i], (MaxPoolSpec, BatchNormSpec)):
            run.append(i)
            prev_shape = shapes[i]
            i += 1
        if i == n:
            if run:
                raise CompileError("MP/BN after the output dense layer is not supported")
            break
        steps += _lower_run(layers, run, integer, bound, fuse_pool)
    return steps


def _lower_run(layers, run, integer, bound, fuse_pool):
    bns = [j for j in run if isinstance(layers[j], BatchNormSpec)]
    if not bns:
        return [StagePlan("maxpool", j) for j in run] + [StagePlan("sign", integer=integer,
                                                                   bound=bound)]
    last = bns[-1]
    before = [j for j in run if j < last]
    after = [j for j in run if j > last]
    fused = []
    if fuse_pool:
        while before and isinstance(layers[before[-1]], MaxPoolSpec):
            fused.insert(0, before.pop())
    out = []
    for j in before:
        if isinstance(layers[j], MaxPoolSpec):
            out.append(StagePlan("maxpool", j))
        else:
            out.append(StagePlan("affine", j))
            integer = False
    out.append(StagePlan("threshold", last, integer=integer, bound=bound))
    out += [StagePlan("bitpool", j, fused=True) for j in fused]
    out += [StagePlan("bitpool", j) for j in after]
    return out


def threshold_for(plan_step: StagePlan, scale, shift) -> Thresholds:
    if plan_step.integer:
        return integer_thresholds(scale, shift, -plan_step.bound, plan_step.bound)
    return float_thresholds(scale, shift)


def build_stages(arch: ArchSpec, steps: list[StagePlan], weights: dict, bn_affine: dict,
                 thresholds: dict | None = None) -> tuple:
    """Materialize stages from packed weights and BN data.

    ``weights`` maps arch layer index -> BitPlane; ``bn_affine`` maps BN index ->
    (scale, shift) for BNs that must be evaluated in float; ``thresholds`` maps
    BN index -> :class:`Thresholds` (computed from ``bn_affine`` when absent).
    """
    thresholds = dict(thresholds or {})
    shapes = infer_shapes(arch)
    stages = []
    last_thr = None
    for step in steps:
        j = step.layer_index
        if step.kind in ("realconv", "binconv"):
            spec = arch.layers[j]
            cin = IN_CHANNELS if j == 0 else _channels_before(shapes, j)
            cls = RealConvStage if step.kind == "realconv" else BinaryConvStage
            stages.append(cls(weights[j], spec.kernel, cin, j))
        elif step.kind == "bindense":
            stages.append(BinaryDenseStage(weights[j], step.logits, j))
        elif step.kind == "maxpool":
            stages.append(MaxPoolStage(j))
        elif step.kind == "affine":
            scale, shift = bn_affine[j]
            stages.append(RealAffineStage(np.asarray(scale, np.float32),
                                          np.asarray(shift, np.float32), j))
        elif step.kind == "sign":
            channels = shapes[_producing_index(steps, step, stages)][-1]
            last_thr = Thresholds.sign(channels, step.integer)
            stages.append(ThresholdStage(last_thr, None))
        elif step.kind == "threshold":
            thr = thresholds.get(j)
            if thr is None:
                thr = threshold_for(step, *bn_affine[j])
            last_thr = thr
            stages.append(ThresholdStage(thr, j))
        elif step.kind == "bitpool":
            channels = shapes[j][-1]
            if step.fused:
                use_and = last_thr.direction == LEQ
            else:
                use_and = np.zeros(channels, bool)
            stages.append(BitPoolStage(np.asarray(use_and, bool), j))
    return tuple(stages)


def _channels_before(shapes, j):
    return shapes[j - 1][-1]


def _producing_index(steps, step, stages):
    # the layer whose output the sign binarizes: last weighted/pool layer before it
    idx = steps.index(step)
    for prev in reversed(steps[:idx]):
        if prev.layer_index is not None:
            return prev.layer_index
    raise CompileError("sign stage without a producer")  # pragma: no cover


def compile_model(model: Model, fuse_pool: bool = False) -> PackedModel:
    """Lower a trained model; BN must carry inference statistics."""
    layers = spec_layers(model)
    arch = model.arch
    if len(layers) != len(arch.layers):
        raise CompileError("model layers do not match its architecture")
    weights, bn_affine = {}, {}
    for j, (spec, layer) in enumerate(zip(arch.layers, layers)):
        if isinstance(spec, QConvSpec):
            if not isinstance(layer, QConv) or layer.binarize_input != (j != 0):
                raise CompileError(f"layer {j}: expected a QConv matching {spec}")
            _check_quantized(layer, j)
            w = layer.weight.value
            # canonical order: one row per filter over flattened (kh, kw, cin)
            rows = sign_forward(w).reshape(-1, w.shape[3]).T
            weights[j] = pack_bits(rows > 0)
        elif isinstance(spec, DenseSpec):
            if not isinstance(layer, QDense) or not layer.binarize_input:
                raise CompileError(f"layer {j}: expected a binarizing QDense matching {spec}")
            if layer.is_output != (j == len(arch.layers) - 1):
                raise CompileError(f"layer {j}: output-layer flag does not match its position")
            _check_quantized(layer, j)
            weights[j] = pack_bits(layer.weight.value.T >= 0)
        elif isinstance(spec, BatchNormSpec):
            if not isinstance(layer, BatchNorm):
                raise CompileError(f"layer {j}: expected a BatchNorm")
            for arr in (layer.gamma.value, layer.beta.value, layer.moving_mean, layer.moving_var):
                if not np.all(np.isfinite(arr)):
                    raise CompileError(f"layer {j}: batch-norm parameters are not finite")
            if np.any(layer.moving_var < 0):
                raise CompileError(f"layer {j}: negative moving variance")
            bn_affine[j] = layer.inference_affine()
    steps = plan(arch, fuse_pool)
    stages = build_stages(arch, steps, weights, bn_affine)
    return PackedModel(arch, stages, fuse_pool, dict(model.metadata))


def _check_quantized(layer, j):
    if not layer.quantized:
        raise CompileError(f"layer {j}: unquantized layers cannot be packed")
    if not np.all(np.isfinite(layer.weight.value)):
        raise CompileError(f"layer {j}: weights are not finite")
