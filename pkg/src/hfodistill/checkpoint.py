"""Binary checkpoint container.

Layout (all integers u32 little-endian)::

    b"SSLD" | version | header length | header JSON (UTF-8)
    then one or more sections until EOF:
    tag length | tag | tensor count | tensors...
    tensor = name length | name | rank | dims... | float32 LE data

The VAE lives in section ``"vae"``; a trained classification head is added as
section ``"classifier"``; externally supplied perceptual features, when used,
as ``"features"``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SSLD"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    sections: dict = field(default_factory=dict)  # tag -> {name: float32 array}

    def tensors(self, tag: str) -> dict:
        try:
            return self.sections[tag]
        except KeyError:
            raise CheckpointError(f"checkpoint has no {tag!r} section") from None

    def has(self, tag: str) -> bool:
        return tag in self.sections

    def with_section(self, tag: str, tensors: dict, **header_updates) -> "Checkpoint":
        sections = dict(self.sections)
        sections[tag] = {k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()}
        header = dict(self.header)
        header.update(header_updates)
        return Checkpoint(header, sections)

    def section_hash(self, tag: str) -> str:
        h = hashlib.sha256()
        for name, arr in self.tensors(tag).items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += _U32.pack(VERSION)
        head = json.dumps(self.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out += _U32.pack(len(head)) + head
        for tag, tensors in self.sections.items():
            t = tag.encode("utf-8")
            out += _U32.pack(len(t)) + t + _U32.pack(len(tensors))
            for name, arr in tensors.items():
                a = np.ascontiguousarray(arr, dtype="<f4")
                n = name.encode("utf-8")
                out += _U32.pack(len(n)) + n + _U32.pack(a.ndim)
                for d in a.shape:
                    out += _U32.pack(d)
                out += a.tobytes()
        return bytes(out)

    def save(self, path) -> None:
        """Atomic write: the previous file survives an interrupted save."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        reader = _Reader(data, source)
        if reader.take(4) != MAGIC:
            raise CheckpointError(f"{source}: bad magic, not a checkpoint")
        version = reader.u32()
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        try:
            header = json.loads(reader.take(reader.u32()).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{source}: corrupt header ({exc})") from None
        sections = {}
        while not reader.done():
            tag = reader.take(reader.u32()).decode("utf-8")
            tensors = {}
            for _ in range(reader.u32()):
                name = reader.take(reader.u32()).decode("utf-8")
                shape = tuple(reader.u32() for _ in range(reader.u32()))
                count = int(np.prod(shape)) if shape else 1
                tensors[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape).copy()
            sections[tag] = tensors
        return cls(header, sections)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes(), str(path))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def done(self) -> bool:
        return self.pos >= len(self.data)
