"""Binary portable pixmap (P6) and graymap (P5) reading and writing.

Chosen over compressed formats so the byte layout is exactly specifiable
with no external decoder. Max value is 255; writes go to a temp file and
rename on success so no partial output survives an error.
"""

from __future__ import annotations

import colorsys
import os

import numpy as np

GOLDEN_RATIO_CONJUGATE = 0.618033988749895


class PixmapError(ValueError):
    """Malformed pixmap payload; carries the offending byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _next_token(buf, pos):
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise PixmapError("unexpected end of header", offset=pos)
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def _read_header(buf, magic):
    token, pos = _next_token(buf, 0)
    if token != magic:
        raise PixmapError(f"expected magic {magic.decode()}, got {token!r}", offset=0)
    fields = []
    for _ in range(3):
        token, pos = _next_token(buf, pos)
        if not token.isdigit():
            raise PixmapError(f"non-numeric header field {token!r}",
                              offset=pos - len(token))
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PixmapError(f"bad dimensions {width}x{height}", offset=0)
    if maxval != 255:
        raise PixmapError(f"unsupported max value {maxval}, expected 255",
                          offset=pos - len(token))
    # exactly one whitespace byte separates header and payload
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PixmapError("missing separator before payload", offset=pos)
    return width, height, pos + 1


def _read(path, magic, channels):
    with open(path, "rb") as fh:
        buf = fh.read()
    width, height, start = _read_header(buf, magic)
    expected = width * height * channels
    payload = buf[start:start + expected]
    if len(payload) < expected:
        raise PixmapError(
            f"payload truncated: expected {expected} bytes, got {len(payload)}",
            offset=start + len(payload))
    arr = np.frombuffer(payload, np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, channels).copy()


def read_ppm(path):
    """RGB image from a binary P6 file as an h x w x 3 uint8 array."""
    return _read(path, b"P6", 3)


def read_pgm(path):
    """Gray/index image from a binary P5 file as an h x w uint8 array."""
    return _read(path, b"P5", 1)


def _atomic_write(path, blob):
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_ppm(path, pixels):
    pixels = np.asarray(pixels, np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected h x w x 3 pixels, got shape {pixels.shape}")
    h, w = pixels.shape[:2]
    _atomic_write(path, b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def write_pgm(path, pixels):
    pixels = np.asarray(pixels, np.uint8)
    if pixels.ndim != 2:
        raise ValueError(f"expected h x w pixels, got shape {pixels.shape}")
    h, w = pixels.shape
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def color_palette(num_classes):
    """Deterministic class colors via golden-ratio hue stepping."""
    colors = np.empty((num_classes, 3), np.uint8)
    for i in range(num_classes):
        hue = (i * GOLDEN_RATIO_CONJUGATE) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
        colors[i] = (round(r * 255), round(g * 255), round(b * 255))
    return colors
