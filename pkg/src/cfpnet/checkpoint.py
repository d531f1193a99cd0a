"""Binary checkpoint persistence.

Layout (all integers unsigned 32-bit little-endian):

    magic "CFPN" | version | variant-config length + UTF-8 text |
    tensor count | per tensor: name length + UTF-8 name, rank,
    extents, little-endian float32 payload

Parameters and batch-norm buffers both travel as tensor records, so a
round trip reproduces the network bitwise. Files write to a temp path and
rename on success.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .network import VariantSpec, build_network

MAGIC = b"CFPN"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint failures."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic."""


class TruncatedCheckpointError(CheckpointError):
    """File ended before the declared contents."""


class StructureError(CheckpointError):
    """Contents disagree with the declared variant or format version."""


def _all_tensors(net):
    for name, tensor in net.named_parameters():
        yield name, tensor.data
    for name, buf in net.named_buffers():
        yield name, buf


def save_checkpoint(net, path):
    """Serialize every parameter and buffer of ``net`` to ``path``."""
    records = list(_all_tensors(net))
    variant = net.variant.to_config().encode()
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(variant)), variant,
             struct.pack("<I", len(records))]
    for name, arr in records:
        encoded = name.encode()
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, "<f4").tobytes())
    blob = b"".join(parts)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class _Reader:
    def __init__(self, fh):
        self.fh = fh
        self.offset = 0

    def read(self, n, what):
        blob = self.fh.read(n)
        self.offset += len(blob)
        if len(blob) != n:
            raise TruncatedCheckpointError(
                f"file ended reading {what} at byte {self.offset}")
        return blob

    def read_u32(self, what):
        return struct.unpack("<I", self.read(4, what))[0]


def load_checkpoint(path):
    """Rebuild a network from ``path``, validating structure throughout."""
    with open(path, "rb") as fh:
        reader = _Reader(fh)
        if reader.read(4, "magic") != MAGIC:
            raise BadMagicError(f"bad magic in {path}")
        version = reader.read_u32("version")
        if version != VERSION:
            raise StructureError(f"unsupported checkpoint version {version}")
        variant_len = reader.read_u32("variant length")
        variant_text = reader.read(variant_len, "variant config").decode()
        try:
            spec = VariantSpec.from_config(variant_text)
        except ValueError as exc:
            raise StructureError(f"bad variant config: {exc}") from exc
        net = build_network(spec)
        expected = dict(_all_tensors(net))

        count = reader.read_u32("tensor count")
        if count != len(expected):
            raise StructureError(
                f"checkpoint declares {count} tensors, variant has {len(expected)}")
        seen = set()
        for index in range(count):
            name_len = reader.read_u32(f"tensor {index} name length")
            name = reader.read(name_len, f"tensor {index} name").decode()
            rank = reader.read_u32(f"tensor {index} rank")
            extents = struct.unpack(
                f"<{rank}I", reader.read(4 * rank, f"tensor {index} extents"))
            if name not in expected:
                raise StructureError(f"tensor {index} has unknown name {name!r}")
            if name in seen:
                raise StructureError(f"tensor {index} duplicates name {name!r}")
            seen.add(name)
            target = expected[name]
            if tuple(extents) != target.shape:
                raise StructureError(
                    f"tensor {index} ({name!r}) extents {extents} do not match "
                    f"declared shape {target.shape}")
            payload = reader.read(4 * int(np.prod(extents, dtype=np.int64)),
                                  f"tensor {index} payload")
            loaded = np.frombuffer(payload, "<f4").reshape(extents)
            np.copyto(target, loaded.astype(target.dtype, copy=False))
    return net
