"""Binary parameter checkpoints.

Layout: ``b"SALG"``, version byte ``0x01``, then one record per tensor until
EOF. A record is the name length (u64), the UTF-8 name, the rank (u64), the
dims (u64 each) and the row-major data (f64). All integers and floats are
little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SALG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params):
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]))
        for name, tensor in params.items():
            data = np.asarray(getattr(tensor, "data", tensor), dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(np.ascontiguousarray(data).tobytes())


def load_checkpoint(path):
    """Read a checkpoint into an ordered dict of name -> float64 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if len(blob) < 5 or blob[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported format version")
    out = {}
    pos = 5
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            if name in out:
                raise CheckpointError(f"{path}: duplicate tensor {name!r}")
            out[name] = data.astype(np.float64).reshape(shape)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated file") from exc
    return out


def load_into(params, path):
    """Copy checkpoint values into an existing parameter dict (names and shapes must match)."""
    stored = load_checkpoint(path)
    missing = set(params) - set(stored)
    extra = set(stored) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match model: missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]}")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise CheckpointError(
                f"{name}: shape {stored[name].shape} in checkpoint, {p.shape} in model")
        p.data[...] = stored[name]
