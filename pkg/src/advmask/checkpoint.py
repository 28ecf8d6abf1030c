"""Binary checkpoint format.

Layout (little-endian)::

    b"AMCK" | u32 schema_version | u32 header_len | header JSON (utf-8, sorted keys)
    u32 n_tensors
    n_tensors x ( u32 name_len | name | u32 rank | rank x u32 dims | f32 payload )
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import Encoder, EncoderConfig, MaskGenerator, MaskGeneratorConfig, Projector, make_rng

MAGIC = b"AMCK"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    encoder: Encoder
    projector: Projector
    mask_model: MaskGenerator | None = None
    seed: int = 0
    epoch: int = 0
    augmentation: str = ""
    metrics: list = field(default_factory=list, repr=False)

    @classmethod
    def initialize(cls, encoder_config: EncoderConfig, mask_config: MaskGeneratorConfig | None, seed: int,
                   augmentation: str = "") -> "Checkpoint":
        rng = make_rng(seed)
        encoder = Encoder(encoder_config, rng)
        projector = Projector(encoder_config, rng)
        mask_model = MaskGenerator(mask_config, rng) if mask_config is not None else None
        return cls(encoder, projector, mask_model, seed=seed, epoch=0, augmentation=augmentation)

    def header(self) -> dict:
        return {
            "augmentation": self.augmentation,
            "encoder": self.encoder.config.to_dict(),
            "epoch": self.epoch,
            "mask_generator": self.mask_model.config.to_dict() if self.mask_model else None,
            "seed": self.seed,
        }

    def tensors(self):
        groups = [("encoder", self.encoder), ("projector", self.projector)]
        if self.mask_model is not None:
            groups.append(("mask", self.mask_model))
        for prefix, model in groups:
            for name, arr in model.params.state().items():
                yield f"{prefix}.{name}", arr

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True).encode()
        parts = [MAGIC, struct.pack("<II", SCHEMA_VERSION, len(header)), header]
        items = list(self.tensors())
        parts.append(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode()
            parts.append(struct.pack("<I", len(nb)) + nb)
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < 16 or raw[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError("checkpoint CRC mismatch (truncated or corrupted file)")
        version, hlen = struct.unpack_from("<II", body, 4)
        if version != SCHEMA_VERSION:
            raise CheckpointError(f"checkpoint schema_version {version}, this build reads {SCHEMA_VERSION}")
        off = 12
        header = json.loads(body[off : off + hlen])
        off += hlen
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off : off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", body, off)
            dims = struct.unpack_from(f"<{rank}I", body, off + 4)
            off += 4 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            tensors[name] = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
        if off != len(body):
            raise CheckpointError("trailing bytes after tensor table")
        mcfg = header["mask_generator"]
        ckpt = cls.initialize(EncoderConfig(**header["encoder"]),
                              MaskGeneratorConfig(**mcfg) if mcfg else None,
                              header["seed"], header["augmentation"])
        ckpt.epoch = header["epoch"]
        groups = {"encoder": ckpt.encoder, "projector": ckpt.projector, "mask": ckpt.mask_model}
        for prefix, model in groups.items():
            if model is None:
                continue
            state = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            expected = set(model.params.state())
            if set(state) != expected:
                raise CheckpointError(f"{prefix}: tensor names do not match the configured architecture")
            model.params.load_state(state)
        return ckpt

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
