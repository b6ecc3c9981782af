"""
Checkpoint file format.

Layout (little-endian throughout)::

    b"ALPI"                      4 bytes magic
    version                      uint32 (currently 1)
    header_len                   uint64
    header                       UTF-8 JSON: config, manifest, metadata
    payload                      float64 parameters, manifest order

The manifest is an ordered list of ``{"name", "shape"}``; the payload must
hold exactly ``sum(prod(shape))`` doubles.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerLM

MAGIC = b"ALPI"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    """Base class for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    """Payload size disagrees with the manifest."""


class TruncatedCheckpointError(CheckpointError):
    """File ends inside the fixed prefix or the JSON header."""


@dataclass(eq=False)
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: TransformerLM, **metadata) -> "ModelCheckpoint":
        params = {k: v.copy() for k, v in model.params.items()}
        return cls(model.config, params, dict(metadata))

    def to_model(self) -> TransformerLM:
        return TransformerLM(self.config, {k: v.copy() for k, v in self.params.items()})

    def manifest(self) -> list[dict]:
        return [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()]

    def to_bytes(self) -> bytes:
        header = {
            "config": self.config.to_dict(),
            "manifest": self.manifest(),
            "metadata": self.metadata,
        }
        hb = json.dumps(header, separators=(",", ":"), allow_nan=False).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(v, dtype=_LE_F64).tobytes() for v in self.params.values())
        return _PREFIX.pack(MAGIC, self.version, len(hb)) + hb + payload

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


def from_bytes(blob: bytes) -> ModelCheckpoint:
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _PREFIX.size:
        raise TruncatedCheckpointError("file ends inside the fixed-size prefix")
    _, version, header_len = _PREFIX.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(blob) < start + header_len:
        raise TruncatedCheckpointError("file ends inside the JSON header")
    header = json.loads(blob[start:start + header_len].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    manifest = header["manifest"]
    payload = memoryview(blob)[start + header_len:]
    expected = 8 * sum(int(np.prod(m["shape"], dtype=np.int64)) for m in manifest)
    if len(payload) != expected:
        raise LengthMismatchError(f"payload holds {len(payload)} bytes, manifest accounts for {expected}")
    params, off = {}, 0
    for m in manifest:
        n = int(np.prod(m["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_LE_F64, count=n, offset=off).astype(np.float64)
        params[m["name"]] = arr.reshape(m["shape"])
        off += 8 * n
    return ModelCheckpoint(config, params, header.get("metadata", {}), version)


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> None:
    atomic_write(path, ckpt.to_bytes())


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    return from_bytes(Path(path).read_bytes())


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
