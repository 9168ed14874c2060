"""Minimal binary PPM (P6) / PGM (P5) reading and writing.

These are the only raster formats the pipeline touches: slides come in as
P6 with an mpp declared on the command line or in a `<image>.mpp` sidecar,
masks and heatmaps go out as P5 with values 0/255.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    pass


def _read_header_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Parse `count` whitespace-separated header integers, skipping comments."""
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise PnmError("truncated header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            eol = data.find(b"\n", pos)
            pos = len(data) if eol < 0 else eol + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace() and data[end : end + 1] != b"#":
                end += 1
            try:
                tokens.append(int(data[pos:end]))
            except ValueError as exc:
                raise PnmError(f"bad header token {data[pos:end]!r}") from exc
            pos = end
    return tokens, pos + 1  # single whitespace after maxval precedes the raster


def _read_raster(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != magic:
        raise PnmError(f"{path}: expected {magic.decode()} file, got {data[:2]!r}")
    (width, height, maxval), offset = _read_header_tokens(data[2:], 3)
    offset += 2
    if maxval != 255:
        raise PnmError(f"{path}: only maxval 255 supported, got {maxval}")
    need = width * height * channels
    raster = data[offset : offset + need]
    if len(raster) != need:
        raise PnmError(f"{path}: raster truncated ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return arr.reshape(shape).copy()


def read_ppm(path) -> np.ndarray:
    """P6 image as (height, width, 3) uint8."""
    return _read_raster(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """P5 image as (height, width) uint8."""
    return _read_raster(path, b"P5", 1)


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise PnmError("PPM pixels must be (h, w, 3)")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise PnmError("PGM pixels must be (h, w)")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def read_mpp_sidecar(image_path) -> float | None:
    """Resolution from `<image>.mpp` next to the file, if present."""
    sidecar = Path(str(image_path) + ".mpp")
    if not sidecar.exists():
        return None
    try:
        value = float(sidecar.read_text().strip())
    except ValueError as exc:
        raise PnmError(f"bad mpp sidecar {sidecar}") from exc
    if value <= 0:
        raise PnmError(f"mpp sidecar {sidecar} must be positive")
    return value
