"""Binary weight checkpoints: magic "EDTR", versioned, digest-guarded.

Layout (all integers little-endian uint32, floats little-endian float32):

    "EDTR" | version | sha256(config) (32 bytes) | config_len | config utf-8
    | tensor_count | per tensor: name_len, name utf-8, rank, dims..., payload

Tensors are written in sorted-name order so identical weights always produce
byte-identical files. The canonical model-config text is embedded so a
checkpoint is self-describing; its digest is checked on load, and an
expected config (when supplied) must hash to the same digest.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import DigestMismatch, MagicMismatch, TruncatedFile, VersionMismatch

MAGIC = b"EDTR"
VERSION = 1


def config_digest(config_text: str) -> bytes:
    return hashlib.sha256(config_text.encode("utf-8")).digest()


def save_checkpoint(path, arrays: dict[str, np.ndarray], config_text: str) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += config_digest(config_text)
    cfg = config_text.encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    names = sorted(arrays)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.asarray(arrays[name], dtype="<f4")
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(
                f"checkpoint ends at byte {len(self.data)}, "
                f"needed {self.pos + n}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expected_config: str | None = None
                    ) -> tuple[dict[str, np.ndarray], str]:
    """Read arrays and the embedded config; verify digests."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise MagicMismatch(f"{path} does not start with {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, supported {VERSION}")
    digest = r.take(32)
    config_text = r.take(r.u32()).decode("utf-8")
    if config_digest(config_text) != digest:
        raise DigestMismatch("embedded config does not match stored digest")
    if expected_config is not None and config_digest(expected_config) != digest:
        raise DigestMismatch("checkpoint was written for a different model config")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        payload = r.take(int(np.prod(dims, dtype=np.int64)) * 4)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
    return arrays, config_text
