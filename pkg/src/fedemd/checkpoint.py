"""Binary weight checkpoints.

Layout (all integers little-endian u32):

    magic "FEFM" | version | image_side | patch_size | embed_dim | n_classes
    | 32-byte config digest | array count
    | repeated: name length, name utf-8, rank, dims..., payload f32 LE

Arrays are stored as float32; a Checkpoint object holds exactly what the
file holds, so load(save(x)) == x bitwise. Converting f64 weights into a
checkpoint quantizes once, at construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import ArchSpec, ModelWeights

MAGIC = b"FEFM"
VERSION = 1


@dataclass
class Checkpoint:
    arch: ArchSpec
    arrays: dict  # name -> float32 ndarray
    config_digest: bytes  # 32 bytes

    @classmethod
    def from_weights(cls, weights: ModelWeights, config_digest: bytes = b"\x00" * 32):
        if len(config_digest) != 32:
            raise ValueError(f"config digest must be 32 bytes, got {len(config_digest)}")
        arrays = {name: arr.astype("<f4") for name, arr in weights.items()}
        return cls(arch=weights.arch, arrays=arrays, config_digest=bytes(config_digest))

    def to_weights(self) -> ModelWeights:
        return ModelWeights(
            self.arch, {name: arr.astype(np.float64) for name, arr in self.arrays.items()}
        )

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<5I", VERSION, self.arch.image_side,
                                    self.arch.patch_size, self.arch.embed_dim,
                                    self.arch.n_classes)]
        parts.append(self.config_digest)
        parts.append(struct.pack("<I", len(self.arrays)))
        for name, arr in self.arrays.items():
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<I", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:4] != MAGIC:
            raise ConfigError(f"bad checkpoint magic {blob[:4]!r}, expected {MAGIC!r}")
        version, side, patch, embed, classes = struct.unpack_from("<5I", blob, 4)
        if version != VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        offset = 4 + 20
        digest = blob[offset : offset + 32]
        offset += 32
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n_values = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n_values, offset=offset)
            offset += 4 * n_values
            arrays[name] = arr.reshape(dims).copy()
        if offset != len(blob):
            raise ConfigError(f"trailing bytes in checkpoint ({len(blob) - offset})")
        arch = ArchSpec(image_side=side, patch_size=patch, embed_dim=embed,
                        n_classes=classes)
        return cls(arch=arch, arrays=arrays, config_digest=digest)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def allequal(self, other: "Checkpoint") -> bool:
        return (
            self.arch == other.arch
            and self.config_digest == other.config_digest
            and set(self.arrays) == set(other.arrays)
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )
