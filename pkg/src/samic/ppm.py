"""Binary PPM (P6) and PGM (P5) image I/O, 8-bit only."""

from __future__ import annotations

import numpy as np


class ImageFormatError(Exception):
    pass


def _read_token(stream) -> bytes:
    tok = b""
    while True:
        ch = stream.read(1)
        if not ch:
            raise ImageFormatError("unexpected end of header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_ppm(path: str) -> np.ndarray:
    """P6 file -> (3, H, W) float64 in [0, 1]."""
    with open(path, "rb") as f:
        if _read_token(f) != b"P6":
            raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
        width = int(_read_token(f))
        height = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise ImageFormatError(f"{path}: only 8-bit images are supported")
        raw = f.read(width * height * 3)
    if len(raw) != width * height * 3:
        raise ImageFormatError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path: str, image: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] -> P6 file."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ImageFormatError("expected a (3, H, W) image")
    _, h, w = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(pixels.transpose(1, 2, 0).tobytes())


def write_pgm(path: str, image: np.ndarray) -> None:
    """(H, W) floats in [0, 1] -> P5 file."""
    if image.ndim != 2:
        raise ImageFormatError("expected a (H, W) grayscale image")
    h, w = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())
