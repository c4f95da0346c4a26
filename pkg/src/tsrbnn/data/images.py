"""Raster decoding and the crop/resize/normalize pipeline."""

from __future__ import annotations

import io
import struct
import zlib

import numpy as np
from PIL import Image

from .dataset import DatasetError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_PPM_WHITESPACE = b" \t\n\r\v\f"


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode a binary (P6) PPM with maxval 255 into ``[H, W, 3]`` uint8."""
    pos = 0
    fields = []
    if data[:2] != b"P6":
        raise DatasetError(f"unsupported PPM format {data[:2]!r}; only binary P6 is handled")
    pos = 2
    while len(fields) < 3:
        if pos >= len(data):
            raise DatasetError("truncated PPM header")
        ch = data[pos:pos + 1]
        if ch in _PPM_WHITESPACE:
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            start = pos
            while pos < len(data) and data[pos:pos + 1] not in _PPM_WHITESPACE + b"#":
                pos += 1
            token = data[start:pos]
            if not token.isdigit():
                raise DatasetError(f"malformed PPM header token {token!r}")
            fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DatasetError(f"malformed PPM dimensions {width}x{height}")
    if maxval != 255:
        raise DatasetError(f"unsupported PPM maxval {maxval}; only 255 is handled")
    if pos >= len(data) or data[pos:pos + 1] not in _PPM_WHITESPACE:
        raise DatasetError("PPM header must end with a single whitespace byte")
    pos += 1
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise DatasetError(f"truncated PPM payload: {len(payload)} of {need} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def _check_png_chunks(data: bytes) -> tuple[int, int]:
    """Walk every chunk verifying its CRC; return IHDR (bit depth, color type)."""
    if data[:8] != PNG_SIGNATURE:
        raise DatasetError("not a PNG file")
    pos = 8
    ihdr = None
    while pos < len(data):
        if pos + 8 > len(data):
            raise DatasetError("truncated PNG chunk header")
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + length]
        crc_bytes = data[pos + 8 + length:pos + 12 + length]
        if len(body) < length or len(crc_bytes) < 4:
            raise DatasetError(f"truncated PNG chunk {ctype!r}")
        if zlib.crc32(ctype + body) != struct.unpack(">I", crc_bytes)[0]:
            raise DatasetError(f"PNG CRC failure in chunk {ctype.decode('latin-1')!r}")
        if ctype == b"IHDR":
            ihdr = (body[8], body[9])
        pos += 12 + length
        if ctype == b"IEND":
            break
    if ihdr is None:
        raise DatasetError("PNG has no IHDR chunk")
    return ihdr


def decode_png(data: bytes) -> np.ndarray:
    """Decode an 8-bit RGB or RGBA PNG into ``[H, W, 3]`` uint8 (alpha dropped)."""
    depth, color_type = _check_png_chunks(data)
    if depth != 8:
        raise DatasetError(f"unsupported PNG bit depth {depth}; only 8-bit is handled")
    if color_type not in (2, 6):
        raise DatasetError(f"unsupported PNG color type {color_type}; only RGB/RGBA are handled")
    with Image.open(io.BytesIO(data)) as img:
        img.load()
        arr = np.asarray(img)
    return np.ascontiguousarray(arr[..., :3])


def decode_image(data: bytes) -> np.ndarray:
    if data[:8] == PNG_SIGNATURE:
        return decode_png(data)
    return decode_ppm(data)


def crop_roi(img: np.ndarray, x1: int, y1: int, x2: int, y2: int) -> np.ndarray:
    """Crop the inclusive box ``[x1..x2] x [y1..y2]`` (clamped to the image)."""
    h, w = img.shape[:2]
    if not (0 <= x1 <= x2 <= w and 0 <= y1 <= y2 <= h):
        raise DatasetError(f"ROI ({x1},{y1})-({x2},{y2}) outside a {w}x{h} image")
    return img[y1:min(y2 + 1, h), x1:min(x2 + 1, w)]


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resize of ``[H, W, C]`` to ``[size, size, C]`` (float64)."""
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape[:2]

    def axis(n_in):
        if size == 1 or n_in == 1:
            pos = np.zeros(size)
        else:
            pos = np.arange(size) * ((n_in - 1) / (size - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(h)
    x0, x1, wx = axis(w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def preprocess(img: np.ndarray, size: int, roi=None) -> np.ndarray:
    """Optional ROI crop, resize and /255 normalization to float32 ``[size, size, 3]``."""
    if roi is not None:
        img = crop_roi(img, *roi)
    out = resize_bilinear(img, size) / 255.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)
