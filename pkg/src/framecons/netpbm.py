"""Minimal binary Netpbm I/O: P6 (RGB) and P5 (gray), 8-bit, maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _header(magic: str, width: int, height: int) -> bytes:
    return f"{magic}\n{width} {height}\n255\n".encode("ascii")


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """``rgb``: uint8 array ``[H, W, 3]``."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise NetpbmError(f"PPM needs uint8 [H, W, 3], got {rgb.dtype} {rgb.shape}")
    Path(path).write_bytes(_header("P6", rgb.shape[1], rgb.shape[0]) + rgb.tobytes())


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise NetpbmError(f"PGM needs uint8 [H, W], got {gray.dtype} {gray.shape}")
    Path(path).write_bytes(_header("P5", gray.shape[1], gray.shape[0]) + gray.tobytes())


def _parse(blob: bytes, path) -> tuple[str, int, int, int, bytes]:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: truncated header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = fields[0].decode("ascii", "replace")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise NetpbmError(f"{path}: malformed header {fields!r}") from exc
    if maxval != 255:
        raise NetpbmError(f"{path}: only maxval 255 is supported, got {maxval}")
    return magic, width, height, maxval, blob[pos:]


def _read(path: str | Path, magic: str, channels: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    got, width, height, _, raster = _parse(blob, path)
    if got != magic:
        raise NetpbmError(f"{path}: expected {magic}, found {got}")
    need = width * height * channels
    if len(raster) != need:
        raise NetpbmError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((height, width, channels) if channels > 1 else (height, width)).copy()


def read_ppm(path: str | Path) -> np.ndarray:
    return _read(path, "P6", 3)


def read_pgm(path: str | Path) -> np.ndarray:
    return _read(path, "P5", 1)


def quantize(values: np.ndarray) -> np.ndarray:
    """Floats in [0, 1] to uint8 via ``round(v * 255)``."""
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
