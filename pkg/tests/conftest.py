import sys
import zlib
import struct
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def randomize_bn(model, rng, spread=3.0):
    """Give every batch norm non-trivial inference statistics (including negative gammas)."""
    for bn in model.batchnorms():
        c = bn.channels
        bn.gamma.value[:] = rng.normal(size=c)
        bn.beta.value[:] = rng.normal(size=c)
        bn.moving_mean[:] = rng.normal(size=c) * spread
        bn.moving_var[:] = rng.uniform(0.1, 4.0, size=c)
    return model


def write_ppm(path: Path, img: np.ndarray, comment: bool = False):
    h, w, _ = img.shape
    head = b"P6\n" + (b"# made by a test\n" if comment else b"") + f"{w} {h}\n255\n".encode()
    path.write_bytes(head + np.ascontiguousarray(img, np.uint8).tobytes())


def png_bytes(img: np.ndarray, bit_depth: int = 8) -> bytes:
    """Minimal PNG encoder (filter type 0) for RGB/RGBA uint8 or 16-bit arrays."""
    h, w, c = img.shape
    color = {3: 2, 4: 6}[c]
    if bit_depth == 16:
        raw = img.astype(">u2").tobytes()
        row = w * c * 2
    else:
        raw = img.astype(np.uint8).tobytes()
        row = w * c
    scan = b"".join(b"\x00" + raw[y * row:(y + 1) * row] for y in range(h))

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, color, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(scan))
            + chunk(b"IEND", b""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []  # (criterion, status, detail), filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")
