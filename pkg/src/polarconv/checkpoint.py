"""Versioned binary checkpoint container.

Layout (all integers little-endian):
  magic   8 bytes  b"PCCKPT\\x00\\x01"
  u32     metadata length
  bytes   metadata JSON (utf-8, sorted keys)
  u32     tensor count
  per tensor:
    u16   name length, name bytes (utf-8)
    u8    dtype code (0=float32, 1=float64, 2=int64)
    u8    ndim, u32 x ndim dims
    raw   little-endian array data, row-major

Writing is fully deterministic: identical state produces identical bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PCCKPT\x00\x01"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict):
    blobs = [MAGIC]
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    blobs.append(struct.pack("<I", len(meta)))
    blobs.append(meta)
    blobs.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor '{name}'")
        nb = name.encode()
        blobs.append(struct.pack("<H", len(nb)))
        blobs.append(nb)
        blobs.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(b"".join(blobs))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    off = 8
    (meta_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    metadata = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize if ndim else dt.itemsize
        n_items = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(buf, dtype=dt, count=n_items, offset=off).reshape(shape).copy()
        off += n_items * dt.itemsize
    return metadata, tensors


def save_network(path, net, extra_metadata: dict | None = None):
    meta = {"format": "polarconv-checkpoint", "layers": net.describe()}
    if extra_metadata:
        meta.update(extra_metadata)
    save_checkpoint(path, dict(net.state_entries()), meta)


def load_into_network(net, path, allow_cross_kind: bool = True):
    """Copy checkpoint tensors into an already-built network by name.

    With allow_cross_kind, kernel matrices from a standard-conv checkpoint
    initialize same-shape norm-angle layers (biases and radius state keep
    their defaults), which makes a pretrained plain CNN a drop-in init.
    """
    metadata, tensors = load_checkpoint(path)
    for i, layer in enumerate(net.layers):
        for name, arr in layer.state().items():
            key = f"layer{i}.{name}"
            if key not in tensors:
                if allow_cross_kind:
                    continue
                raise CheckpointError(f"checkpoint is missing tensor '{key}'")
            src = tensors[key]
            if src.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for '{key}': checkpoint {src.shape} vs net {arr.shape}")
            if name == "norm_ma":
                layer.norm_ma = float(src[0])
            else:
                arr[...] = src.astype(arr.dtype)
    return metadata
