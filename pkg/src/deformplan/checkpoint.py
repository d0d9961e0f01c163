"""Parameter checkpoint files.

Layout (all integers little-endian):

    magic   4 bytes  b"DFNW"
    version u32      currently 1
    count   u32      number of named parameters
    entry*  count times:
        name_len u32, name (UTF-8), rank u32, dims rank x u64,
        values   prod(dims) x f64 (raw little-endian)

Values round-trip bit-exactly: they are written with ``tobytes`` and read
back with ``frombuffer``, so no parsing or formatting touches them.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"DFNW"
VERSION = 1

__all__ = ["save_params", "load_params", "load_arrays", "params_digest"]


def save_params(path, params: dict[str, Tensor | np.ndarray]) -> None:
    """Write named parameters; iteration order of the dict is preserved."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as plain arrays, in file order."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic {blob[:4]!r})")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
        offset += 8 * rank
        n_values = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(blob, dtype="<f8", count=n_values, offset=offset).copy()
        offset += 8 * n_values
        out[name] = values.reshape(dims)
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after last parameter")
    return out


def load_params(path, requires_grad: bool = True) -> dict[str, Tensor]:
    """Read a checkpoint as trainable Tensors keyed by name."""
    return {
        name: Tensor(arr, requires_grad=requires_grad, name=name)
        for name, arr in load_arrays(path).items()
    }


def params_digest(params: dict[str, Tensor | np.ndarray]) -> str:
    """SHA-256 over names and raw values; used to assert freeze contracts."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        value = params[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
