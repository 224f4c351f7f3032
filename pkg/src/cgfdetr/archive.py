"""Named-tensor container with a fixed binary layout.

Layout (all integers little-endian)::

    b"CGFW" | u32 version (=1) | u64 manifest length | manifest (UTF-8 JSON) | blob

The manifest lists ``{"name", "dtype", "shape", "offset"}`` per tensor, with
``offset`` relative to the start of the blob. Tensors are stored as raw
little-endian float32/float64 in C order.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Optional, Union

import numpy as np

MAGIC = b"CGFW"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class ArchiveError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_offset: int

    @property
    def nbytes(self) -> int:
        return math.prod(self.shape) * _DTYPES[self.dtype].itemsize


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise ArchiveError(f"unsupported dtype {arr.dtype}; archives hold f32/f64 only")


class WeightArchive:
    """Ordered mapping from tensor name to array."""

    def __init__(self, tensors: Optional[Mapping[str, np.ndarray]] = None):
        self._tensors: dict[str, np.ndarray] = {}
        for name, arr in (tensors or {}).items():
            self[name] = arr

    def __setitem__(self, name: str, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        _dtype_tag(arr)
        self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def manifest(self) -> list[ManifestEntry]:
        entries, offset = [], 0
        for name, arr in self._tensors.items():
            e = ManifestEntry(name, _dtype_tag(arr), tuple(int(s) for s in arr.shape), offset)
            entries.append(e)
            offset += e.nbytes
        return entries

    def to_bytes(self) -> bytes:
        entries = self.manifest()
        manifest = json.dumps(
            {"tensors": [{"name": e.name, "dtype": e.dtype, "shape": list(e.shape),
                          "offset": e.byte_offset} for e in entries]},
            separators=(",", ":")).encode("utf-8")
        blob = b"".join(np.ascontiguousarray(arr, dtype=_DTYPES[e.dtype]).tobytes()
                        for e, arr in zip(entries, self._tensors.values()))
        return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightArchive":
        if len(data) < _HEADER.size:
            raise ArchiveError(f"truncated header: {len(data)} bytes")
        magic, version, mlen = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ArchiveError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        start = _HEADER.size
        if start + mlen > len(data):
            raise ArchiveError(f"manifest length {mlen} exceeds file size {len(data)}")
        try:
            raw = json.loads(data[start:start + mlen].decode("utf-8"))
            entries = [ManifestEntry(str(t["name"]), str(t["dtype"]),
                                     tuple(int(s) for s in t["shape"]), int(t["offset"]))
                       for t in raw["tensors"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ArchiveError(f"malformed manifest: {exc}") from None
        blob = memoryview(data)[start + mlen:]
        seen, end = set(), 0
        for e in entries:
            if e.name in seen:
                raise ArchiveError(f"duplicate tensor name {e.name!r}")
            seen.add(e.name)
            if e.dtype not in _DTYPES:
                raise ArchiveError(f"tensor {e.name!r}: unknown dtype {e.dtype!r}")
            if any(s < 0 for s in e.shape):
                raise ArchiveError(f"tensor {e.name!r}: negative dimension in {e.shape}")
            if e.byte_offset < end:
                raise ArchiveError(f"tensor {e.name!r} at offset {e.byte_offset} overlaps the "
                                   f"previous tensor ending at {end}")
            if e.byte_offset + e.nbytes > len(blob):
                raise ArchiveError(f"tensor {e.name!r} spans bytes {e.byte_offset}.."
                                   f"{e.byte_offset + e.nbytes} beyond blob of {len(blob)} bytes")
            end = e.byte_offset + e.nbytes
        if end != len(blob):
            raise ArchiveError(f"blob is {len(blob)} bytes but manifest covers {end}")
        out = cls()
        for e in entries:
            if e.nbytes == 0:
                out._tensors[e.name] = np.zeros(e.shape, dtype=_DTYPES[e.dtype].newbyteorder("="))
                continue
            arr = np.frombuffer(blob, dtype=_DTYPES[e.dtype], count=math.prod(e.shape),
                                offset=e.byte_offset).reshape(e.shape)
            out._tensors[e.name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        return out


def archive_write(a: WeightArchive, path: Union[str, Path]) -> None:
    Path(path).write_bytes(a.to_bytes())


def archive_read(path: Union[str, Path]) -> WeightArchive:
    return WeightArchive.from_bytes(Path(path).read_bytes())
