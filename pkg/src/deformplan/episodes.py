"""On-disk episode files and dataset manifests.

Episode file layout (integers little-endian):

    magic    4 bytes  b"DFNE"
    version  u32      currently 1
    meta_len u32, UTF-8 JSON metadata
    count    u32      number of named arrays
    array*   count times:
        name_len u32, name UTF-8, dtype tag u8 (0 = f64, 1 = f32),
        rank u32, dims rank x u64, raw little-endian values

Frames are stored as f32 (they are renders); particles, actions, and costs
as f64. The dataset manifest is a JSON index with per-file SHA-256
checksums and provenance tags ("random" or "planned").
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DFNE"
VERSION = 1
MANIFEST_NAME = "manifest.json"

_DTYPES = {0: "<f8", 1: "<f4"}
_TAGS = {"<f8": 0, "<f4": 1}

__all__ = [
    "Episode",
    "write_episode",
    "read_episode",
    "write_arrays",
    "read_arrays",
    "Manifest",
    "file_sha256",
    "MANIFEST_NAME",
]


@dataclass
class Episode:
    """One trajectory: metadata plus aligned per-step arrays.

    Shapes for an episode of T steps with C cameras at resolution R
    (encoder) and S (supervision):
        actions   (T, action_dim)          f64
        particles (T+1, n_particles, 3)    f64
        costs     (T+1,)                   f64, training cost to goal
        rgb       (T+1, C, R, R, 3)        f32
        depth     (T+1, C, R, R)           f32
        rgb_sup   (T+1, C, S, S, 3)        f32
    """

    metadata: dict
    arrays: dict[str, np.ndarray]

    REQUIRED = ("actions", "particles", "costs", "rgb", "depth", "rgb_sup")

    @property
    def steps(self) -> int:
        return len(self.arrays["actions"])

    def validate(self) -> None:
        missing = [k for k in self.REQUIRED if k not in self.arrays]
        if missing:
            raise ValueError(f"episode missing arrays {missing}")
        t = self.steps
        for name in ("particles", "costs", "rgb", "depth", "rgb_sup"):
            if len(self.arrays[name]) != t + 1:
                raise ValueError(
                    f"episode array {name!r} has {len(self.arrays[name])} entries, expected {t + 1}"
                )
        rgb = self.arrays["rgb"]
        depth = self.arrays["depth"]
        if rgb.shape[:2] != depth.shape[:2] or rgb.shape[2:4] != depth.shape[2:4]:
            raise ValueError("rgb and depth shapes disagree")
        res = self.metadata.get("resolution")
        if res is not None and rgb.shape[2] != res:
            raise ValueError(
                f"frames have resolution {rgb.shape[2]}, metadata declares {res}"
            )


def write_arrays(path, metadata: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dtype = "<f4" if arr.dtype == np.float32 else "<f8"
            arr = np.ascontiguousarray(arr, dtype=dtype)
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BI", _TAGS[dtype], arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def read_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not an episode file (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported episode version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    metadata = json.loads(blob[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        tag, rank = struct.unpack_from("<BI", blob, offset)
        offset += 5
        dims = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
        offset += 8 * rank
        dtype = _DTYPES[tag]
        n_values = int(np.prod(dims)) if rank else 1
        itemsize = np.dtype(dtype).itemsize
        values = np.frombuffer(blob, dtype=dtype, count=n_values, offset=offset).copy()
        offset += itemsize * n_values
        arrays[name] = values.reshape(dims)
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return metadata, arrays


def write_episode(path, episode: Episode) -> None:
    episode.validate()
    write_arrays(path, episode.metadata, episode.arrays)


def read_episode(path) -> Episode:
    metadata, arrays = read_arrays(path)
    episode = Episode(metadata=metadata, arrays=arrays)
    episode.validate()
    return episode


def file_sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


@dataclass
class Manifest:
    """JSON dataset index: episode files, checksums, provenance."""

    metadata: dict = field(default_factory=dict)
    episodes: list = field(default_factory=list)  # {file, sha256, provenance, steps}

    def add(self, directory: Path, filename: str, provenance: str, steps: int) -> None:
        self.episodes.append(
            {
                "file": filename,
                "sha256": file_sha256(Path(directory) / filename),
                "provenance": provenance,
                "steps": steps,
            }
        )

    def save(self, directory) -> None:
        payload = {"metadata": self.metadata, "episodes": self.episodes}
        path = Path(directory) / MANIFEST_NAME
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(directory) -> "Manifest":
        path = Path(directory) / MANIFEST_NAME
        payload = json.loads(path.read_text())
        return Manifest(metadata=payload["metadata"], episodes=payload["episodes"])

    def verify(self, directory) -> None:
        """Recompute checksums; raises on any mismatch or missing file."""
        directory = Path(directory)
        for entry in self.episodes:
            path = directory / entry["file"]
            if not path.exists():
                raise FileNotFoundError(f"manifest references missing file {entry['file']}")
            digest = file_sha256(path)
            if digest != entry["sha256"]:
                raise ValueError(f"checksum mismatch for {entry['file']}")

    def paths(self, directory, provenance: str | None = None) -> list[Path]:
        directory = Path(directory)
        return [
            directory / e["file"]
            for e in self.episodes
            if provenance is None or e["provenance"] == provenance
        ]
