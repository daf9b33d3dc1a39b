"""PDCT tensor files and checkpoint directories.

A PDCT file is::

    b"PDCT" | u8 version=1 | u8 dtype (0 = f32) | u16 rank | rank x u32 extents | values

with all integers and values little-endian and values in row-major order.
A checkpoint is a directory of PDCT files plus ``manifest.txt`` whose lines
are ``<tensor name> <file name>``; ``#`` lines hold metadata as ``# key = value``.
"""
import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"PDCT"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
MANIFEST = "manifest.txt"


def encode_pdct(array):
    a = np.asarray(array)
    if a.ndim > 0xFFFF:
        raise CheckpointError(f"rank {a.ndim} too large for PDCT")
    if a.ndim and min(a.shape) < 1:
        raise CheckpointError(f"PDCT extents must be positive, got {a.shape}")
    header = MAGIC + struct.pack("<BBH", VERSION, 0, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_pdct(data, source="<bytes>"):
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a PDCT file (bad magic)")
    version, dtype, rank = struct.unpack_from("<BBH", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported PDCT version {version}")
    if dtype not in DTYPES:
        raise CheckpointError(f"{source}: unsupported PDCT dtype code {dtype}")
    off = 8 + 4 * rank
    if len(data) < off:
        raise CheckpointError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(shape, dtype=np.int64))
    dt = DTYPES[dtype]
    if len(data) != off + count * dt.itemsize:
        raise CheckpointError(
            f"{source}: payload is {len(data) - off} bytes, expected {count * dt.itemsize} for shape {shape}"
        )
    values = np.frombuffer(data, dtype=dt, count=count, offset=off)
    return values.astype(np.float64).reshape(shape)


def write_pdct(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_pdct(array))


def read_pdct(path):
    with open(path, "rb") as fh:
        return decode_pdct(fh.read(), source=str(path))


def _file_name(name):
    return name.replace("/", "_") + ".pdct"


def save_checkpoint(directory, tensors, meta=None):
    """Write ``tensors`` (name -> array) and a manifest into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    lines = [f"# {k} = {v}" for k, v in sorted((meta or {}).items())]
    for name in sorted(tensors):
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        fname = _file_name(name)
        write_pdct(os.path.join(directory, fname), tensors[name])
        lines.append(f"{name} {fname}")
    tmp = os.path.join(directory, MANIFEST + ".tmp")
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, os.path.join(directory, MANIFEST))


def load_checkpoint(directory):
    """Return ``(tensors, meta)`` from a checkpoint directory."""
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise CheckpointError(f"{directory}: no {MANIFEST}")
    tensors, meta = {}, {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                meta[key.strip()] = value.strip()
                continue
            try:
                name, fname = line.split()
            except ValueError:
                raise CheckpointError(f"{path}: malformed manifest line {line!r}") from None
            tensors[name] = read_pdct(os.path.join(directory, fname))
    return tensors, meta
