"""Binary PPM (P6) reading and PGM (P5) writing with numpy only."""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    pass


def _header_fields(buf, count):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    fields = []
    pos = 2
    n = len(buf)
    while len(fields) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        try:
            fields.append(int(buf[start:pos]))
        except ValueError:
            raise ImageFormatError(f"bad header field {buf[start:pos]!r}") from None
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    return fields, pos + 1


def decode_ppm(buf):
    """(H, W, 3) float64 in [0, 1] from the bytes of a binary PPM."""
    if buf[:2] != b"P6":
        raise ImageFormatError("not a binary PPM (P6) file")
    (width, height, maxval), offset = _header_fields(buf, 3)
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"image dimensions must be positive, got {width}x{height}")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"maxval must be in 1..65535, got {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    needed = width * height * 3 * dtype.itemsize
    raster = buf[offset:offset + needed]
    if len(raster) < needed:
        raise ImageFormatError(f"raster truncated: {len(raster)} of {needed} bytes")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width, 3)
    return pixels.astype(np.float64) / maxval


def read_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def encode_ppm(image):
    """8-bit P6 bytes from (H, W, 3) floats in [0, 1] (values are clipped)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    pixels = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def write_ppm(path, image):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def encode_pgm(values):
    """P5 bytes from an (H, W) integer map; 16-bit big-endian once any value exceeds 255."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise ValueError("PGM values must lie in 0..65535")
    top = int(arr.max()) if arr.size else 0
    maxval = 255 if top <= 255 else 65535
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    h, w = arr.shape
    return b"P5\n%d %d\n%d\n" % (w, h, maxval) + arr.astype(dtype).tobytes()


def write_pgm(path, values):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(values))


def decode_pgm(buf):
    """(H, W) integer map and maxval from P5 bytes."""
    if buf[:2] != b"P5":
        raise ImageFormatError("not a binary PGM (P5) file")
    (width, height, maxval), offset = _header_fields(buf, 3)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    needed = width * height * dtype.itemsize
    raster = buf[offset:offset + needed]
    if len(raster) < needed:
        raise ImageFormatError("raster truncated")
    return np.frombuffer(raster, dtype=dtype).reshape(height, width).astype(np.int64), maxval


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())
