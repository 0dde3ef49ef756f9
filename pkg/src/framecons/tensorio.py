"""Binary tensor records ("TSR1") and the named-section checkpoint container ("CKP1").

TSR1, little-endian: ``b"TSR1"``, u32 rank, rank x u32 dims, then the float64
values in row-major order.

CKP1, little-endian: ``b"CKP1"``, u32 section count, then per section
u32 name length, UTF-8 name, u8 kind (0 = text, 1 = TSR1 tensor),
u64 payload length, payload.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TSR_MAGIC = b"TSR1"
CKP_MAGIC = b"CKP1"
KIND_TEXT = 0
KIND_TENSOR = 1


class FormatError(ValueError):
    """Raised when a TSR1/CKP1 stream is malformed."""


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"unexpected end of stream (wanted {n} bytes, got {len(buf)})")
    return buf


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    stream.write(TSR_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.tobytes(order="C"))


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = _read_exact(stream, 4)
    if magic != TSR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    if any(d <= 0 for d in dims):
        raise FormatError(f"tensor dims must be positive, got {dims}")
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(stream, 8 * count), dtype="<f8")
    return data.reshape(dims).astype(np.float64)


def tensor_to_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    stream = io.BytesIO(blob)
    arr = read_tensor(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after tensor record")
    return arr


def save_container(path: str | Path, texts: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    """Write text and tensor sections; section order is the dicts' insertion order."""
    buf = io.BytesIO()
    buf.write(CKP_MAGIC)
    buf.write(struct.pack("<I", len(texts) + len(tensors)))
    sections = [(k, KIND_TEXT, v.encode("utf-8")) for k, v in texts.items()]
    sections += [(k, KIND_TENSOR, tensor_to_bytes(v)) for k, v in tensors.items()]
    for name, kind, payload in sections:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BQ", kind, len(payload)))
        buf.write(payload)
    Path(path).write_bytes(buf.getvalue())


def load_container(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    stream = io.BytesIO(Path(path).read_bytes())
    magic = stream.read(4)
    if magic != CKP_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    texts: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(stream, 4))
        name = _read_exact(stream, nlen).decode("utf-8")
        kind, plen = struct.unpack("<BQ", _read_exact(stream, 9))
        payload = _read_exact(stream, plen)
        if kind == KIND_TEXT:
            texts[name] = payload.decode("utf-8")
        elif kind == KIND_TENSOR:
            tensors[name] = tensor_from_bytes(payload)
        else:
            raise FormatError(f"{path}: section {name!r} has unknown kind {kind}")
    if stream.read(1):
        raise FormatError(f"{path}: trailing bytes after last section")
    return texts, tensors


def format_kv(pairs: dict[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs.items())


def parse_kv(text: str, source: str = "<text>") -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
