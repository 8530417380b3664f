"""Binary PGM (P5) / PPM (P6) reading and writing for 8-bit images."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path: str | Path, pixels: np.ndarray) -> Path:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    return _write(path, b"P5", pixels)


def write_ppm(path: str | Path, pixels: np.ndarray) -> Path:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"PPM needs an HxWx3 uint8 array, got {pixels.dtype} {pixels.shape}")
    return _write(path, b"P6", pixels)


def _write(path, magic: bytes, pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = pixels.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    path.write_bytes(header + np.ascontiguousarray(pixels).tobytes())
    return path


def _tokens(data: bytes):
    """Yield (token, end offset) for header fields, skipping comments."""
    i = 0
    while True:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        yield data[i:j], j
        i = j


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a P5/P6 file; returns ``H x W`` or ``H x W x 3`` uint8."""
    data = Path(path).read_bytes()
    tok = _tokens(data)
    magic, _ = next(tok)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    w = int(next(tok)[0])
    h = int(next(tok)[0])
    maxval_tok, end = next(tok)
    if int(maxval_tok) != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    channels = 3 if magic == b"P6" else 1
    body = data[end + 1 : end + 1 + w * h * channels]
    if len(body) != w * h * channels:
        raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNM image as ``H x W x C`` float64 in [0, 1]."""
    arr = read_pnm(path).astype(np.float64) / 255.0
    return arr[:, :, None] if arr.ndim == 2 else arr


def save_image(path: str | Path, img: np.ndarray) -> Path:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        return write_pgm(path, to_uint8(img))
    return write_ppm(path, to_uint8(img))
