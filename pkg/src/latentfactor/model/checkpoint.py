"""Binary checkpoint files.

Layout: a 4-byte little-endian header length, a UTF-8 JSON header, then a
little-endian float64 blob.  The header carries the format version, the model
config, the return normalization constant, free-form metadata and an index
mapping every tensor name to its ``[offset, shape]`` in the blob (offsets in
elements).  Deployed weights are stored under ``weights/`` and the final raw
optimizer iterate under ``raw/``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig

FORMAT_VERSION = 1
MAGIC_GROUPS = ("weights", "raw")


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    norm_constant: float = 1.0
    raw_weights: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        index: dict[str, list] = {}
        chunks = []
        offset = 0
        groups = [("weights", self.weights)]
        if self.raw_weights is not None:
            groups.append(("raw", self.raw_weights))
        for group, tensors in groups:
            for name, arr in tensors.items():
                a = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
                index[f"{group}/{name}"] = [offset, list(a.shape)]
                chunks.append(a.ravel())
                offset += a.size
        header = {
            "version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "norm_constant": self.norm_constant,
            "meta": self.meta,
            "index": index,
            "n_values": offset,
        }
        hb = json.dumps(header, sort_keys=True).encode()
        blob = np.concatenate(chunks).astype("<f8").tobytes() if chunks else b""
        return struct.pack("<I", len(hb)) + hb + blob

    @classmethod
    def from_bytes(cls, buf: bytes) -> Checkpoint:
        if len(buf) < 4:
            raise CheckpointError("checkpoint truncated before header length")
        (hlen,) = struct.unpack("<I", buf[:4])
        try:
            header = json.loads(buf[4:4 + hlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
        blob = np.frombuffer(buf[4 + hlen:], dtype="<f8")
        if blob.size != header["n_values"]:
            raise CheckpointError(f"weight count {blob.size} does not match index ({header['n_values']})")
        groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in MAGIC_GROUPS}
        for key, (off, shape) in header["index"].items():
            group, name = key.split("/", 1)
            size = int(np.prod(shape, dtype=np.int64))
            if off < 0 or off + size > blob.size:
                raise CheckpointError(f"tensor {key} lies outside the blob")
            groups[group][name] = blob[off:off + size].reshape(shape).astype(np.float64)
        return cls(
            config=ModelConfig.from_dict(header["config"]),
            weights=groups["weights"],
            norm_constant=float(header["norm_constant"]),
            raw_weights=groups["raw"] or None,
            meta=header.get("meta", {}),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())
