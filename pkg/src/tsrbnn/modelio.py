"""Binary model files (``.bnn``), little-endian throughout.

Layout::

    magic           4s   b"BNNM"
    version         u16
    mode            u8   0 = LATENT, 1 = PACKED
    flags           u8   bit 0: BitPool fusion used when packing
    arch            u32 length + UTF-8 text (DSL form)
    input_size      u16
    classes         u16
    normalization   u16 length + UTF-8 tag
    seed            u64
    epochs          u32
    batch_size      u32
    learning_rate   f64
    final_val_acc   f64  (NaN when unknown)
    metadata        u32 length + UTF-8 JSON (sorted keys)
    payload_length  u64
    payload         bytes
    crc32           u32  over every preceding byte

LATENT payload: for each layer in architecture order, the float32 latent
weights (conv ``[K,K,Cin,F]``, dense ``[In,Units]``, C order) or, for batch
norm, gamma, beta, moving mean and moving variance (one float32 per channel
each).

PACKED payload: a single bit stream holding every weighted layer's +-1
weights in architecture order (conv: one filter after another, each over
``(kh, kw, cin)``; dense: ``[out][in]``), bit ``i`` of the stream in bit
``i % 8`` of byte ``i // 8``, zero-padded to a whole byte. It is followed by
two float32 per batch-norm channel: ``(threshold, code)`` for a folded BN
(code 1 = ``x >= t``, -1 = ``x <= t``, 2 = constant +1, -2 = constant -1) or
``(scale, shift)`` for a BN kept as a float affine stage. The payload is
therefore exactly ``ceil(binary_params / 8) + 4 * real_params`` bytes.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .arch import BatchNormSpec, DenseSpec, QConvSpec, count_params, infer_shapes, parse_arch, \
    IN_CHANNELS
from .binkernel.bitplane import pack_bits, unpack_bits
from .binkernel.engine import PackedModel, build_stages, compile_model, plan
from .binkernel.fold import CONST, GEQ, LEQ, Thresholds
from .layers import BN_EPSILON, BN_MOMENTUM, BatchNorm, QConv, QDense
from .network import Model, build_model, spec_layers

MAGIC = b"BNNM"
VERSION = 1
LATENT = 0
PACKED = 1
MODES = {"latent": LATENT, "packed": PACKED}
_FLAG_FUSE = 1

_CODE_CONST_TRUE = 2
_CODE_CONST_FALSE = -2


class ModelFormatError(ValueError):
    """The file is not a well-formed model file."""


class ChecksumError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


def _lp(fmt: str, data: bytes) -> bytes:
    return struct.pack("<" + fmt, len(data)) + data


def _header(mode: int, flags: int, arch, metadata: dict) -> bytes:
    meta = dict(metadata)
    norm = str(meta.get("normalization", "div255"))

    def num(key, default):
        v = meta.get(key)
        return default if v is None else v

    fixed = struct.pack(
        "<QIIdd",
        int(num("seed", 0)) & 0xFFFFFFFFFFFFFFFF,
        int(num("epochs", 0)),
        int(num("batch_size", 0)),
        float(num("learning_rate", 0.0)),
        float(num("final_val_acc", math.nan)),
    )
    return b"".join([
        MAGIC,
        struct.pack("<HBB", VERSION, mode, flags),
        _lp("I", str(arch).encode()),
        struct.pack("<HH", arch.input_size, arch.classes),
        _lp("H", norm.encode()),
        fixed,
        _lp("I", json.dumps(meta, sort_keys=True, default=_json_default).encode()),
    ])


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"metadata value {obj!r} is not serializable")


def latent_payload(model: Model) -> bytes:
    out = io.BytesIO()
    for j, layer in enumerate(spec_layers(model)):
        if isinstance(layer, (QConv, QDense)):
            w = layer.weight.value
            if not np.all(np.isfinite(w)):
                raise ValueError(f"layer {j}: weights are not finite")
            out.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        elif isinstance(layer, BatchNorm):
            for arr in (layer.gamma.value, layer.beta.value, layer.moving_mean, layer.moving_var):
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"layer {j}: batch-norm parameters are not finite")
                out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def _threshold_rows(thr: Thresholds) -> np.ndarray:
    code = np.where(thr.direction == GEQ, 1,
                    np.where(thr.direction == LEQ, -1,
                             np.where(thr.constant, _CODE_CONST_TRUE, _CODE_CONST_FALSE)))
    return np.stack([thr.values.astype(np.float32), code.astype(np.float32)], axis=1)


def packed_payload(pm: PackedModel) -> bytes:
    bits = []
    bn_rows = {}
    for st in pm.stages:
        if st.name in ("RealConv", "BinConv") or st.name.startswith("BinDense"):
            bits.append(unpack_bits(st.weights).ravel())
        elif st.name == "Threshold":
            bn_rows[st.bn_index] = _threshold_rows(st.thresholds)
        elif st.name == "RealAffine":
            bn_rows[st.bn_index] = np.stack([st.scale, st.shift], axis=1).astype(np.float32)
    stream = np.concatenate(bits) if bits else np.zeros(0, bool)
    out = np.packbits(stream, bitorder="little").tobytes()
    for j in sorted(bn_rows):
        out += np.ascontiguousarray(bn_rows[j], dtype="<f4").tobytes()
    return out


def to_bytes(obj, mode: str = "latent", fuse_pool: bool = False) -> bytes:
    """Serialize a :class:`Model` (LATENT or PACKED) or a :class:`PackedModel` (PACKED)."""
    mode_id = MODES.get(mode.lower()) if isinstance(mode, str) else mode
    if mode_id is None:
        raise ValueError(f"mode must be 'latent' or 'packed', got {mode!r}")
    if isinstance(obj, PackedModel):
        if mode_id != PACKED:
            raise ValueError("a packed model can only be saved in PACKED mode")
        pm = obj
    elif mode_id == PACKED:
        pm = compile_model(obj, fuse_pool=fuse_pool)
    else:
        pm = None
    if pm is not None:
        payload = packed_payload(pm)
        head = _header(PACKED, _FLAG_FUSE if pm.fuse_pool else 0, pm.arch, pm.metadata)
    else:
        payload = latent_payload(obj)
        meta = dict(obj.metadata)
        meta["quantized"] = all(getattr(lay, "quantized", True) for lay in obj.layers)
        head = _header(LATENT, 0, obj.arch, meta)
    body = head + struct.pack("<Q", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def save(obj, path, mode: str = "latent", fuse_pool: bool = False) -> int:
    """Write ``obj`` to ``path`` atomically; returns the number of bytes written."""
    data = to_bytes(obj, mode, fuse_pool)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"file truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def text(self, fmt: str) -> str:
        (n,) = self.unpack(fmt)
        try:
            return self.take(n).decode()
        except UnicodeDecodeError:
            raise ModelFormatError("invalid UTF-8 in header") from None


def from_bytes(data: bytes):
    """Parse a model file; returns a :class:`Model` (LATENT) or :class:`PackedModel` (PACKED)."""
    if len(data) < 8 or data[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    r = _Reader(data)
    r.take(4)
    version, mode, flags = r.unpack("HBB")
    if version != VERSION:
        raise VersionError(f"unsupported model format version {version} (this build reads {VERSION})")
    if len(data) < 4 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise ChecksumError("checksum mismatch: file is corrupted or truncated")
    arch_text = r.text("I")
    input_size, classes = r.unpack("HH")
    r.text("H")
    r.unpack("QIIdd")
    try:
        meta = json.loads(r.text("I"))
    except json.JSONDecodeError:
        raise ModelFormatError("metadata is not valid JSON") from None
    (plen,) = r.unpack("Q")
    payload = r.take(plen)
    if r.pos != len(data) - 4:
        raise ModelFormatError(f"{len(data) - 4 - r.pos} unexpected trailing byte(s)")
    try:
        arch = parse_arch(arch_text, input_size)
    except ValueError as exc:
        raise ModelFormatError(f"stored architecture is invalid: {exc}") from None
    if arch.classes != classes:
        raise ModelFormatError(f"header says {classes} classes, architecture has {arch.classes}")
    if mode == LATENT:
        return _latent_model(arch, payload, meta)
    if mode == PACKED:
        return _packed_model(arch, payload, meta, bool(flags & _FLAG_FUSE))
    raise ModelFormatError(f"unknown storage mode {mode}")


def load(path):
    return from_bytes(Path(path).read_bytes())


def _take_f32(buf: memoryview, pos: int, count: int, what: str):
    end = pos + 4 * count
    if end > len(buf):
        raise ModelFormatError(f"payload too short for {what}")
    return np.frombuffer(buf[pos:end], dtype="<f4").astype(np.float32), end


def _latent_model(arch, payload: bytes, meta: dict) -> Model:
    model = build_model(arch, np.random.default_rng(0), quantized=bool(meta.get("quantized", True)),
                        bn_epsilon=float(meta.get("bn_epsilon", BN_EPSILON)),
                        bn_momentum=float(meta.get("bn_momentum", BN_MOMENTUM)))
    buf = memoryview(payload)
    pos = 0
    for j, layer in enumerate(spec_layers(model)):
        if isinstance(layer, (QConv, QDense)):
            shape = layer.weight.value.shape
            vals, pos = _take_f32(buf, pos, int(np.prod(shape)), f"layer {j} weights")
            layer.weight.value[...] = vals.reshape(shape)
        elif isinstance(layer, BatchNorm):
            c = layer.channels
            for target in (layer.gamma.value, layer.beta.value, layer.moving_mean, layer.moving_var):
                vals, pos = _take_f32(buf, pos, c, f"layer {j} batch norm")
                target[...] = vals
    if pos != len(payload):
        raise ModelFormatError(f"payload has {len(payload) - pos} unexpected trailing byte(s)")
    model.metadata = meta
    return model


def _packed_model(arch, payload: bytes, meta: dict, fuse_pool: bool) -> PackedModel:
    shapes = infer_shapes(arch)
    report = count_params(arch)
    nbits = report.binary_params
    nbytes = (nbits + 7) // 8
    expected = nbytes + 4 * report.real_trainable
    if len(payload) != expected:
        raise ModelFormatError(f"packed payload is {len(payload)} bytes, expected {expected}")
    stream = np.unpackbits(np.frombuffer(payload[:nbytes], np.uint8), bitorder="little",
                           count=nbits).astype(bool)
    weights = {}
    offset = 0
    prev = (arch.input_size, arch.input_size, IN_CHANNELS)
    for j, spec in enumerate(arch.layers):
        if isinstance(spec, QConvSpec):
            rows, length = spec.filters, spec.kernel * spec.kernel * prev[-1]
        elif isinstance(spec, DenseSpec):
            rows, length = spec.units, int(np.prod(prev))
        else:
            prev = shapes[j]
            continue
        chunk = stream[offset:offset + rows * length].reshape(rows, length)
        weights[j] = pack_bits(chunk)
        offset += rows * length
        prev = shapes[j]
    steps = plan(arch, fuse_pool)
    by_bn = {s.layer_index: s for s in steps if s.kind in ("threshold", "affine")}
    pos = nbytes
    buf = memoryview(payload)
    bn_affine, thresholds = {}, {}
    for j, spec in enumerate(arch.layers):
        if not isinstance(spec, BatchNormSpec):
            continue
        c = shapes[j][-1]
        vals, pos = _take_f32(buf, pos, 2 * c, f"layer {j} batch norm")
        a, b = vals[0::2], vals[1::2]
        step = by_bn.get(j)
        if step is None:
            raise ModelFormatError(f"layer {j}: batch norm has no stage in the lowering")
        if step.kind == "affine":
            bn_affine[j] = (a, b)
            continue
        code = b.astype(np.int64)
        if not np.all(np.isin(code, (1, -1, _CODE_CONST_TRUE, _CODE_CONST_FALSE))):
            raise ModelFormatError(f"layer {j}: invalid threshold direction code")
        direction = np.where(code == 1, GEQ, np.where(code == -1, LEQ, CONST)).astype(np.int8)
        values = a.astype(np.int64) if step.integer else a
        if step.integer and not np.array_equal(values.astype(np.float32), a):
            raise ModelFormatError(f"layer {j}: integer threshold is not integral")
        thresholds[j] = Thresholds(values, direction, code == _CODE_CONST_TRUE)
    stages = build_stages(arch, steps, weights, bn_affine, thresholds)
    return PackedModel(arch, stages, fuse_pool, meta)


def payload_size(data: bytes) -> int:
    """Payload length recorded in a serialized model (for size accounting)."""
    r = _Reader(data)
    r.take(8)
    r.text("I")
    r.unpack("HH")
    r.text("H")
    r.unpack("QIIdd")
    r.text("I")
    return r.unpack("Q")[0]
