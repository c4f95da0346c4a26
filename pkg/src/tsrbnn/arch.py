"""Architecture description language, shape inference and parameter accounting.

An architecture is written the way model tables describe it, e.g.::

    QConv(32, 3x3), MP(2x2), QConv(64, 2x2), MP(2x2), BN, D(43)

Tokens are case-insensitive and whitespace is ignored. ``MP`` may be written
bare or as ``MP(2x2)``; ``×`` is accepted in place of ``x``. The flatten
between the last spatial layer and the first dense layer is implicit.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

from .tensor import DimensionError, conv_out_dims, pool_out_dims

IN_CHANNELS = 3
GTSRB_CLASSES = 43
STUDY_INPUT_SIZES = (30, 48, 64)
SWEEP_KERNELS = (2, 3, 5)
SWEEP_FILTERS = (16, 32, 64, 128, 256)
SWEEP_NEURONS = (0, 64, 128, 256, 512, 1024)


class ArchError(ValueError):
    """Invalid architecture (bad grammar, illegal ordering or shape underflow)."""


class ArchParseError(ArchError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class ShapeInferenceError(ArchError):
    def __init__(self, message: str, layer_index: int):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


@dataclass(frozen=True)
class QConvSpec:
    filters: int
    kernel: int

    def __str__(self):
        return f"QConv({self.filters},{self.kernel}x{self.kernel})"


@dataclass(frozen=True)
class MaxPoolSpec:
    def __str__(self):
        return "MP(2x2)"


@dataclass(frozen=True)
class BatchNormSpec:
    def __str__(self):
        return "BN"


@dataclass(frozen=True)
class DenseSpec:
    units: int

    def __str__(self):
        return f"D({self.units})"


LayerSpec = Union[QConvSpec, MaxPoolSpec, BatchNormSpec, DenseSpec]


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple
    input_size: int = 30

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate(self)

    @property
    def classes(self) -> int:
        return self.layers[-1].units

    def __str__(self):
        return ", ".join(str(layer) for layer in self.layers)

    def with_input_size(self, size: int) -> "ArchSpec":
        return ArchSpec(self.layers, size)


_TOKEN = re.compile(
    r"""
    (?P<qconv>QCONV\((?P<f>\d+),(?P<k1>\d+)[X×](?P<k2>\d+)\))
    | (?P<mp>MP(\((?P<p1>\d+)[X×](?P<p2>\d+)\))?)
    | (?P<bn>BN)
    | (?P<dense>D\((?P<u>\d+)\))
    """,
    re.VERBOSE,
)


def parse_arch(text: str, input_size: int = 30) -> ArchSpec:
    """Parse the textual architecture form into an :class:`ArchSpec`."""
    if not text or not text.strip():
        raise ArchParseError("empty architecture string", 0)
    # keep a map from compacted offsets back to the caller's string for diagnostics
    compact, origin = [], []
    for i, ch in enumerate(text):
        if not ch.isspace():
            compact.append(ch.upper())
            origin.append(i)
    s = "".join(compact)
    origin.append(len(text))
    layers = []
    pos = 0
    while True:
        m = _TOKEN.match(s, pos)
        if m is None:
            raise ArchParseError(f"unrecognized layer token {s[pos:pos + 12]!r}", origin[pos])
        if m.group("qconv"):
            k1, k2 = int(m.group("k1")), int(m.group("k2"))
            if k1 != k2:
                raise ArchParseError("only square kernels are supported", origin[pos])
            layers.append(QConvSpec(int(m.group("f")), k1))
        elif m.group("mp"):
            if m.group("p1") and (m.group("p1"), m.group("p2")) != ("2", "2"):
                raise ArchParseError("max pooling is fixed to 2x2", origin[pos])
            layers.append(MaxPoolSpec())
        elif m.group("bn"):
            layers.append(BatchNormSpec())
        else:
            layers.append(DenseSpec(int(m.group("u"))))
        pos = m.end()
        if pos == len(s):
            break
        if s[pos] != ",":
            raise ArchParseError("expected ','", origin[pos])
        pos += 1
    return ArchSpec(tuple(layers), input_size)


def validate(arch: ArchSpec) -> None:
    layers = arch.layers
    if not layers:
        raise ArchError("architecture has no layers")
    if arch.input_size < 1:
        raise ArchError(f"input size must be positive, got {arch.input_size}")
    if not isinstance(layers[0], QConvSpec):
        raise ArchError("the first layer must be a QConv (MP/BN/D may not precede it)")
    if not isinstance(layers[-1], DenseSpec):
        raise ArchError("the last layer must be the D(classes) output layer")
    seen_dense = False
    for i, layer in enumerate(layers):
        if isinstance(layer, QConvSpec):
            if layer.filters < 1 or layer.kernel < 1:
                raise ArchError(f"layer {i}: {layer} needs filters >= 1 and kernel >= 1")
            if seen_dense:
                raise ArchError(f"layer {i}: {layer} after a dense layer")
        elif isinstance(layer, MaxPoolSpec):
            if seen_dense:
                raise ArchError(f"layer {i}: MP after a dense layer")
        elif isinstance(layer, DenseSpec):
            if layer.units < 1:
                raise ArchError(f"layer {i}: {layer} needs units >= 1")
            seen_dense = True
        elif not isinstance(layer, BatchNormSpec):
            raise ArchError(f"layer {i}: unknown layer {layer!r}")
    infer_shapes(arch)


def infer_shapes(arch: ArchSpec) -> list[tuple[int, ...]]:
    """Output shape (without batch axis) of every layer in order."""
    shape: tuple[int, ...] = (arch.input_size, arch.input_size, IN_CHANNELS)
    out = []
    for i, layer in enumerate(arch.layers):
        try:
            if isinstance(layer, QConvSpec):
                h, w = conv_out_dims(shape[0], shape[1], layer.kernel)
                shape = (h, w, layer.filters)
            elif isinstance(layer, MaxPoolSpec):
                h, w = pool_out_dims(shape[0], shape[1])
                shape = (h, w, shape[2])
            elif isinstance(layer, DenseSpec):
                shape = (layer.units,)
        except DimensionError as exc:
            raise ShapeInferenceError(f"{layer}: {exc}", i) from None
        out.append(shape)
    return out


@dataclass(frozen=True)
class LayerReport:
    name: str
    out_shape: tuple
    binary: int
    real: int
    real_non_trainable: int = 0


@dataclass(frozen=True)
class ParamReport:
    binary_params: int
    real_trainable: int
    real_non_trainable: int
    layers: tuple = field(default_factory=tuple)

    @property
    def total_params(self) -> int:
        """Binary plus trainable real parameters (the tables' "Total" column)."""
        return self.binary_params + self.real_trainable

    @property
    def binary_model_kib(self) -> float:
        return model_size(self)[0]

    @property
    def float32_model_kib(self) -> float:
        return model_size(self)[1]


def count_params(arch: ArchSpec) -> ParamReport:
    shapes = infer_shapes(arch)
    prev: tuple = (arch.input_size, arch.input_size, IN_CHANNELS)
    rows = []
    flattened = False
    for layer, shape in zip(arch.layers, shapes):
        binary = real = frozen = 0
        if isinstance(layer, QConvSpec):
            binary = layer.kernel * layer.kernel * prev[2] * layer.filters
        elif isinstance(layer, DenseSpec):
            if not flattened:
                rows.append(LayerReport("Flatten", (math.prod(prev),), 0, 0))
                flattened = True
            binary = math.prod(prev) * layer.units
        elif isinstance(layer, BatchNormSpec):
            real = 2 * prev[-1]
            frozen = 2 * prev[-1]
        rows.append(LayerReport(str(layer), shape, binary, real, frozen))
        prev = shape
    return ParamReport(
        binary_params=sum(r.binary for r in rows),
        real_trainable=sum(r.real for r in rows),
        real_non_trainable=sum(r.real_non_trainable for r in rows),
        layers=tuple(rows),
    )


def model_size(report: ParamReport) -> tuple[float, float]:
    """Model size in KiB: (1-bit weights + float32 reals, everything float32)."""
    binary_kib = (report.binary_params / 8 + report.real_trainable * 4) / 1024
    float_kib = (report.binary_params + report.real_trainable) * 4 / 1024
    return binary_kib, float_kib


def _internal_dense(n: int, with_bn: bool) -> list:
    if n < 0:
        raise ArchError(f"dense width must be >= 0, got {n}")
    if n == 0:
        return []
    return [DenseSpec(n), BatchNormSpec()] if with_bn else [DenseSpec(n)]


def _xnor(f1, k1, f2, k2, pool, bn_after_second):
    layers = [QConvSpec(f1, k1)]
    if pool:
        layers.append(MaxPoolSpec())
    layers.append(QConvSpec(f2, k2))
    if pool:
        layers.append(MaxPoolSpec())
    if bn_after_second:
        layers.append(BatchNormSpec())
    return layers


def _deep(filters, kernels, pooled_blocks, last_bn):
    layers = []
    for i, (f, k) in enumerate(zip(filters, kernels)):
        layers.append(QConvSpec(f, k))
        if i < pooled_blocks:
            layers += [MaxPoolSpec(), BatchNormSpec()]
        elif last_bn:
            layers.append(BatchNormSpec())
    return layers


def _preset_layers(name, n, f1, k1, f2, k2, f3, k3):
    two_block = (f1 or 32, k1 or 3, f2 or 64, k2 or 2)
    deep = ((f1 or 32, f2 or 64, f3 or 64), (k1 or 5, k2 or 5, k3 or 3))
    if name == "xnor_q":
        return _xnor(*two_block, pool=False, bn_after_second=False), 30
    if name == "xnor_q_mp":
        return _xnor(*two_block, pool=True, bn_after_second=False), 30
    if name == "xnor_q_bn":
        return _xnor(*two_block, pool=False, bn_after_second=True), 30
    if name == "xnor_q_mp_bn":
        return _xnor(*two_block, pool=True, bn_after_second=True), 30
    if name == "four_block_30":
        return _deep(*deep, pooled_blocks=2, last_bn=False) + _internal_dense(n, False), 30
    if name == "acc_gtsrb":
        return _deep(*deep, pooled_blocks=3, last_bn=False) + _internal_dense(n, True), 64
    if name == "acc_chinese":
        return _deep(*deep, pooled_blocks=2, last_bn=True) + _internal_dense(n, True), 48
    raise ArchError(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}")


PRESETS = (
    "xnor_q", "xnor_q_mp", "xnor_q_bn", "xnor_q_mp_bn",
    "four_block_30", "acc_gtsrb", "acc_chinese",
)


def preset(name: str, n: int = 0, input_size: int | None = None, classes: int = GTSRB_CLASSES,
           f1=None, k1=None, f2=None, k2=None, f3=None, k3=None) -> ArchSpec:
    """Named architectures of the study.

    ``n`` is the width of the optional internal dense layer (0 = absent).
    Two-block presets default to QConv(32,3x3)/QConv(64,2x2); the deeper ones
    to QConv(32,5x5)/QConv(64,5x5)/QConv(64,3x3). ``f*``/``k*`` override
    filters and kernels block by block.
    """
    layers, default_size = _preset_layers(name, n, f1, k1, f2, k2, f3, k3)
    return ArchSpec(tuple(layers) + (DenseSpec(classes),), input_size or default_size)


def resolve_arch(text: str, input_size: int | None = None) -> ArchSpec:
    """Accept either DSL text or ``preset[:key=value,...]``."""
    text = text.strip()
    if "(" in text or "," in text and ":" not in text:
        return parse_arch(text, input_size or 30)
    name, _, argstr = text.partition(":")
    kwargs = {}
    for item in filter(None, (a.strip() for a in argstr.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ArchError(f"preset argument {item!r} must look like key=value")
        try:
            kwargs[key.strip()] = int(value)
        except ValueError:
            raise ArchError(f"preset argument {item!r} must be an integer") from None
    allowed = {"n", "classes", "f1", "k1", "f2", "k2", "f3", "k3"}
    unknown = set(kwargs) - allowed
    if unknown:
        raise ArchError(f"unknown preset argument(s): {', '.join(sorted(unknown))}")
    return preset(name.strip(), input_size=input_size, **kwargs)


def format_summary(arch: ArchSpec) -> str:
    report = count_params(arch)
    header = ("Layer", "OutShape", "BinaryParams", "RealParams")
    rows = [header, ("Input", str((arch.input_size, arch.input_size, IN_CHANNELS)), "0", "0")]
    for r in report.layers:
        rows.append((r.name, str(r.out_shape), str(r.binary), str(r.real)))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = []
    for j, row in enumerate(rows):
        lines.append("  ".join(
            cell.ljust(widths[i]) if i < 2 else cell.rjust(widths[i]) for i, cell in enumerate(row)
        ).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    bin_kib, f32_kib = model_size(report)
    lines += [
        "",
        f"input size:          {arch.input_size}x{arch.input_size}",
        f"binary params:       {report.binary_params}",
        f"real params:         {report.real_trainable}",
        f"total params:        {report.total_params}",
        f"non-trainable real:  {report.real_non_trainable}",
        f"binary model KiB:    {bin_kib:.2f}",
        f"float-32 model KiB:  {f32_kib:.2f}",
    ]
    return "\n".join(lines)
