"""Netpbm image IO.  P6 PPM is the canonical lossless format; PNG is accepted
on ingest and converted to the same canonical bytes."""

from __future__ import annotations

import hashlib
import os

import numpy as np


class ImageDecodeError(ValueError):
    pass


def ppm_bytes(pixels: np.ndarray) -> bytes:
    """Canonical P6 encoding of an ``(H, W, 3)`` uint8 array."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def pgm_bytes(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ValueError(f"expected (H, W) pixels, got {pixels.shape}")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def _parse_netpbm(raw: bytes, magic: bytes, channels: int) -> np.ndarray:
    if not raw.startswith(magic):
        raise ImageDecodeError(f"not a {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageDecodeError("truncated header")
        fields.append(int(raw[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ImageDecodeError(f"unsupported maxval {maxval}")
    body = raw[pos : pos + w * h * channels]
    if len(body) != w * h * channels:
        raise ImageDecodeError("truncated pixel data")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return np.frombuffer(body, dtype=np.uint8).reshape(shape).copy()


def read_pixels(path) -> np.ndarray:
    """Decode a PPM or PNG file to ``(H, W, 3)`` uint8."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc
    if raw.startswith(b"P6"):
        return _parse_netpbm(raw, b"P6", 3)
    if raw.startswith(b"\x89PNG"):
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    raise ImageDecodeError(f"{path}: unsupported image format")


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return _parse_netpbm(fh.read(), b"P5", 1)


def write_ppm(path, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(pixels))


def write_pgm(path, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(pixels))


def md5_hex(pixels: np.ndarray) -> str:
    return hashlib.md5(ppm_bytes(pixels)).hexdigest()


def to_chw(pixels: np.ndarray) -> np.ndarray:
    """uint8 ``(H, W, 3)`` -> float64 ``(3, H, W)`` in ``[0, 1]``."""
    return np.transpose(pixels.astype(np.float64) / 255.0, (2, 0, 1))


def to_hwc(image: np.ndarray) -> np.ndarray:
    """float ``(3, H, W)`` in ``[0, 1]`` -> uint8 ``(H, W, 3)``."""
    return np.clip(np.rint(np.transpose(image, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
