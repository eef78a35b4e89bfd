"""Binary sample blocks shared by adversarial-example dumps and dataset files.

Layout, little-endian throughout::

    b"SAPX"  version:u32  count:u32  dim:u32
    count * dim float64   (row-major samples)
    count u32             true labels
    count u32             target labels (0xFFFFFFFF = untargeted)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"SAPX"
VERSION = 1
NO_TARGET = 0xFFFFFFFF
_HEADER = struct.Struct("<4sIII")


class DumpFormatError(ValueError):
    pass


def write_block(stream: BinaryIO, x, labels, targets=None) -> None:
    x = np.ascontiguousarray(x, dtype="<f8")
    if x.ndim != 2:
        raise DumpFormatError(f"samples must be 2-D, got shape {x.shape}")
    count, dim = x.shape
    labels = np.asarray(labels)
    if labels.shape != (count,):
        raise DumpFormatError(f"expected {count} labels, got {labels.shape}")
    if targets is None:
        targets = np.full(count, NO_TARGET, dtype=np.uint64)
    targets = np.asarray(targets)
    if targets.shape != (count,):
        raise DumpFormatError(f"expected {count} targets, got {targets.shape}")
    stream.write(_HEADER.pack(MAGIC, VERSION, count, dim))
    stream.write(x.tobytes())
    stream.write(labels.astype("<u4").tobytes())
    stream.write(targets.astype("<u4").tobytes())


def read_block(stream: BinaryIO) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(x, labels, targets)``; targets keep the 0xFFFFFFFF sentinel."""
    head = stream.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise DumpFormatError("truncated SAPX header")
    magic, version, count, dim = _HEADER.unpack(head)
    if magic != MAGIC:
        raise DumpFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DumpFormatError(f"unsupported SAPX version {version}")

    def take(nbytes: int) -> bytes:
        buf = stream.read(nbytes)
        if len(buf) != nbytes:
            raise DumpFormatError("truncated SAPX block")
        return buf

    x = np.frombuffer(take(8 * count * dim), dtype="<f8").reshape(count, dim).astype(np.float64)
    labels = np.frombuffer(take(4 * count), dtype="<u4").astype(np.int64)
    targets = np.frombuffer(take(4 * count), dtype="<u4").astype(np.int64)
    return x, labels, targets


def to_bytes(x, labels, targets=None) -> bytes:
    buf = io.BytesIO()
    write_block(buf, x, labels, targets)
    return buf.getvalue()


def save_adversarial(path, x_adv, labels, targets=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        write_block(f, x_adv, labels, targets)
    return path


def load_adversarial(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        return read_block(f)
