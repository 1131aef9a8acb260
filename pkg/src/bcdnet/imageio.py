"""Binary PPM (P6) reading and writing; PNG through Pillow when installed."""

from __future__ import annotations

import os
import re

import numpy as np

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


class ImageFormatError(ValueError):
    pass


def decode_ppm(data: bytes) -> np.ndarray:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise ImageFormatError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("malformed PPM header") from None
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PPM is supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    n = width * height * 3
    if len(data) - pos < n:
        raise ImageFormatError("PPM pixel data is truncated")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(height, width, 3).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + image.tobytes()


def read_image(path) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError:
            raise ImageFormatError("PNG input needs Pillow installed") from None
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    raise ImageFormatError(f"{path}: unsupported image format (expected binary PPM)")


def write_image(path, image: np.ndarray) -> None:
    path = os.fspath(path)
    if path.lower().endswith(".png"):
        from PIL import Image

        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)
        return
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))
