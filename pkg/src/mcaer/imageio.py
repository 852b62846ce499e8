"""Netpbm image codecs (binary PPM/PGM) plus an optional Pillow fallback.

Images in memory are float arrays in [0, 1]: H x W x 3 for colour, H x W for
single-channel data.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

_NETPBM = {b"P5": 1, b"P6": 3}


def _read_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ParseError("truncated netpbm header")
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    magic = fields[0]
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ParseError(f"bad netpbm header fields {fields!r}") from exc
    return magic, width, height, maxval, pos


def decode_netpbm(buf: bytes) -> np.ndarray:
    magic, width, height, maxval, pos = _read_header(buf)
    if magic not in _NETPBM:
        raise ParseError(f"unsupported netpbm magic {magic!r} (need P5 or P6)")
    if not 0 < maxval < 256:
        raise ParseError(f"only 8-bit netpbm is supported, maxval={maxval}")
    channels = _NETPBM[magic]
    n = width * height * channels
    raster = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos) if len(buf) - pos >= n else None
    if raster is None:
        raise ParseError(f"netpbm raster truncated: need {n} bytes, have {len(buf) - pos}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return raster.reshape(shape).astype(np.float64) / maxval


def encode_netpbm(image: np.ndarray) -> bytes:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ValidationError(f"cannot encode image of shape {arr.shape} as netpbm")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Load an image as float64 in [0,1] (H x W x 3, or H x W for grayscale)."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return decode_netpbm(path.read_bytes())
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ParseError(f"{path}: only PPM/PGM supported without Pillow") from exc
    with Image.open(path) as im:
        mode = "L" if im.mode in ("1", "L", "I", "I;16") else "RGB"
        return np.asarray(im.convert(mode), dtype=np.float64) / 255.0


def read_rgb(path: str | os.PathLike) -> np.ndarray:
    img = read_image(path)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return img


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_netpbm(image))


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """8-bit single-channel mask -> uint8 {0,1}, thresholded at 128."""
    img = read_image(path)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return (np.rint(img * 255.0) >= 128).astype(np.uint8)


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    write_image(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)
