"""Flat little-endian binary container shared by parameter and model files.

Layout::

    b"ODEV" | version u32 | D u32 | H u32 | M u32 | r u32 | kind u8
    then, until EOF, sections of
        name_len u16 | name (utf-8) | count u64 | count x float64

All integers and reals are little-endian.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"ODEV"
VERSION = 1

KIND_BLOCK = 0
KIND_TEACHER = 1
KIND_STUDENT = 2

_HEADER = struct.Struct("<4sIIIIIB")


class FormatError(ValueError):
    """Malformed or unsupported container file."""


@dataclass
class Container:
    dim: int
    heads: int
    patches: int
    mlp_ratio: int
    kind: int = KIND_BLOCK
    sections: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write(buf, self)
        return buf.getvalue()


def write(f: BinaryIO, c: Container) -> None:
    f.write(_HEADER.pack(MAGIC, c.version, c.dim, c.heads, c.patches, c.mlp_ratio, c.kind))
    for name, arr in c.sections.items():
        raw = name.encode("utf-8")
        flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.tobytes())


def read(f: BinaryIO) -> Container:
    head = f.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated header")
    magic, version, dim, heads, patches, ratio, kind = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    c = Container(dim, heads, patches, ratio, kind, version=version)
    while True:
        lb = f.read(2)
        if not lb:
            break
        if len(lb) != 2:
            raise FormatError("truncated section name length")
        (n,) = struct.unpack("<H", lb)
        name = f.read(n)
        cb = f.read(8)
        if len(name) != n or len(cb) != 8:
            raise FormatError("truncated section header")
        (count,) = struct.unpack("<Q", cb)
        payload = f.read(8 * count)
        if len(payload) != 8 * count:
            raise FormatError(f"truncated section {name!r}")
        c.sections[name.decode("utf-8")] = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return c


def save(path: str | os.PathLike, c: Container) -> None:
    atomic_write_bytes(path, c.to_bytes())


def load(path: str | os.PathLike) -> Container:
    with open(path, "rb") as f:
        return read(f)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
