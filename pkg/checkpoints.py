"""
Checkpoint container for parameter groups.

Byte layout (all integers little-endian):

    magic        4 bytes   b"SSCK"
    version      u16       1
    config hash  32 bytes  SHA-256 of the model-defining config sections
    group count  u16
    per group:
        tag          u8 length + UTF-8 bytes (mu, lambda, alpha, beta, gamma, omega, phi)
        tensor count u32
        per tensor:
            layer id  u16 length + UTF-8 bytes
            ndim      u8
            dims      ndim x u32
            values    product(dims) x float64 ('<f8'), C order

Loading reproduces every value bit-for-bit.
"""
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable

import numpy as np

from errors import CheckpointError
from tensor_core import GROUP_TAGS, ParamGroup

logger = logging.getLogger(__name__)

MAGIC = b"SSCK"
VERSION = 1
HASH_BYTES = 32


@dataclass
class ModelParams:
    """The seven parameter groups of the system, any subset of which may be present."""
    groups: Dict[str, ParamGroup] = field(default_factory=dict)

    def __getitem__(self, tag):
        return self.groups[tag]

    def __contains__(self, tag):
        return tag in self.groups

    def add(self, group):
        self.groups[group.tag] = group
        return group

    def select(self, tags: Iterable[str]):
        return [self.groups[t] for t in tags]

    def freeze(self, tags: Iterable[str]):
        for tag in tags:
            self.groups[tag].set_requires_grad(False)

    def unfreeze(self, tags: Iterable[str]):
        for tag in tags:
            self.groups[tag].set_requires_grad(True)

    def checksums(self):
        return {tag: group.checksum() for tag, group in self.groups.items()}

    def ordered(self):
        return [self.groups[t] for t in GROUP_TAGS if t in self.groups]


def serialize(params: ModelParams, cfg_hash: bytes) -> bytes:
    if len(cfg_hash) != HASH_BYTES:
        raise CheckpointError('<memory>', f"config hash must be {HASH_BYTES} bytes, got {len(cfg_hash)}")
    groups = params.ordered()
    parts = [MAGIC, struct.pack('<H', VERSION), cfg_hash, struct.pack('<H', len(groups))]
    for group in groups:
        tag = group.tag.encode('utf-8')
        parts.append(struct.pack('<B', len(tag)) + tag)
        parts.append(struct.pack('<I', len(group)))
        for layer_id, tensor in group.items():
            name = layer_id.encode('utf-8')
            parts.append(struct.pack('<H', len(name)) + name)
            parts.append(struct.pack('<B', tensor.data.ndim))
            parts.append(struct.pack(f'<{tensor.data.ndim}I', *tensor.shape))
            parts.append(np.ascontiguousarray(tensor.data, dtype='<f8').tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, n):
        if self.offset + n > len(self.blob):
            raise CheckpointError(self.path, f"truncated at byte {self.offset} (wanted {n} more)")
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(blob: bytes, path='<memory>'):
    """Return (ModelParams, config_hash)."""
    reader = _Reader(blob, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(path, "bad magic, not a checkpoint file")
    (version,) = reader.unpack('<H')
    if version != VERSION:
        raise CheckpointError(path, f"unsupported version {version}")
    cfg_hash = reader.take(HASH_BYTES)
    (group_count,) = reader.unpack('<H')

    params = ModelParams()
    for _ in range(group_count):
        (tag_len,) = reader.unpack('<B')
        tag = reader.take(tag_len).decode('utf-8')
        if tag not in GROUP_TAGS:
            raise CheckpointError(path, f"unknown group tag {tag!r}")
        group = ParamGroup(tag)
        (tensor_count,) = reader.unpack('<I')
        for _ in range(tensor_count):
            (name_len,) = reader.unpack('<H')
            layer_id = reader.take(name_len).decode('utf-8')
            (ndim,) = reader.unpack('<B')
            dims = reader.unpack(f'<{ndim}I') if ndim else ()
            count = int(np.prod(dims)) if dims else 1
            values = np.frombuffer(reader.take(8 * count), dtype='<f8').reshape(dims)
            group.add(layer_id, values.astype(np.float64))
        params.add(group)

    if reader.offset != len(blob):
        raise CheckpointError(path, f"{len(blob) - reader.offset} trailing bytes")
    return params, cfg_hash


def save_checkpoint(path, params: ModelParams, cfg_hash: bytes):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        f.write(serialize(params, cfg_hash))
    os.replace(tmp_path, path)
    logger.info(f"Wrote checkpoint {path} ({', '.join(g.tag for g in params.ordered())})")


def load_checkpoint(path, expected_hash: bytes = None) -> ModelParams:
    if not os.path.exists(path):
        raise CheckpointError(path, "missing; run the stage that produces it first")
    with open(path, 'rb') as f:
        params, cfg_hash = deserialize(f.read(), path)
    if expected_hash is not None and cfg_hash != expected_hash:
        logger.warning(f"Checkpoint {path} was written under a different configuration")
    return params
