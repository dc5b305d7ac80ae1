"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    magic   8 bytes   b"INPCKPT1"
    count   uint32    number of records
    record  * count:
        name_len  uint16, name  utf-8 bytes
        dtype     2 bytes, always b"f8"
        ndim      uint8, dims  uint32 * ndim
        data      float64 * prod(dims), little-endian, row-major

Loading parses and validates the whole file before touching the model, so a
failed load leaves the model unchanged.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"INPCKPT1"


def encode_tensors(named):
    parts = [MAGIC, struct.pack("<I", len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + b"f8" + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(blob):
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("checkpoint truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        if bytes(take(2)) != b"f8":
            raise FormatError(f"tensor {name}: unsupported dtype tag")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(bytes(take(8 * n)), dtype="<f8").astype(np.float64).reshape(shape)
        if name in out:
            raise FormatError(f"tensor {name} appears twice")
        out[name] = data
    if pos != len(view):
        raise FormatError("trailing bytes after last checkpoint record")
    return out


def save_checkpoint(model, path):
    named = {name: p.data for name, p in model.named_parameters().items()}
    with open(path, "wb") as fh:
        fh.write(encode_tensors(named))


def load_checkpoint(model, path):
    with open(path, "rb") as fh:
        tensors = decode_tensors(fh.read())
    params = model.named_parameters()
    unknown = sorted(set(tensors) - set(params))
    if unknown:
        raise FormatError(f"unknown tensor names in checkpoint: {', '.join(unknown)}")
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {', '.join(missing)}")
    bad = [f"{n} {tensors[n].shape} vs {params[n].shape}" for n in params if tensors[n].shape != params[n].shape]
    if bad:
        raise FormatError(f"shape mismatch against config: {'; '.join(bad)}")
    for name, p in params.items():
        p.data[...] = tensors[name]
    return model


def dump(path):
    """Human-readable listing: one line per tensor with shape and summary stats."""
    with open(path, "rb") as fh:
        tensors = decode_tensors(fh.read())
    lines = []
    for name, arr in tensors.items():
        lines.append(f"{name}\t{list(arr.shape)}\tmean={arr.mean():.6g}\tstd={arr.std():.6g}")
    return "\n".join(lines)
