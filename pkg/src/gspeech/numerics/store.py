"""NamedTensorStore: the flat checkpoint unit shared by every model component.

Binary layout (little-endian)::

    b"GSPC" | u32 version=1 | u32 count
    per tensor: u32 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 rank
                | u32 dims[rank] | f32 payload
"""

from __future__ import annotations

import hashlib
import io
import struct
from collections.abc import MutableMapping
from pathlib import Path

import numpy as np

MAGIC = b"GSPC"
VERSION = 1
DTYPE_F32 = 0


class StoreFormatError(ValueError):
    pass


class MissingTensorError(KeyError):
    """A required parameter is absent or has the wrong shape."""

    def __str__(self):
        return str(self.args[0])


class NamedTensorStore(MutableMapping):
    """Ordered name -> float32 array mapping with bit-exact serialization."""

    def __init__(self, tensors=None):
        self._data: dict[str, np.ndarray] = {}
        if tensors:
            for k, v in dict(tensors).items():
                self[k] = v

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._data[name]
        except KeyError:
            raise MissingTensorError(f"missing tensor {name!r}") from None

    def __setitem__(self, name: str, value) -> None:
        arr = np.ascontiguousarray(value, dtype=np.float32)
        if arr.ndim > 255:
            raise StoreFormatError(f"rank too large for {name!r}")
        self._data[name] = arr

    def __delitem__(self, name: str) -> None:
        del self._data[name]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def require(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        arr = self[name]
        if tuple(arr.shape) != tuple(shape):
            raise MissingTensorError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}")
        return arr

    def subset(self, prefix: str) -> "NamedTensorStore":
        return NamedTensorStore({k: v for k, v in self._data.items() if k.startswith(prefix)})

    def update_from(self, other: "NamedTensorStore") -> None:
        for k, v in other.items():
            self[k] = v

    def copy(self) -> "NamedTensorStore":
        return NamedTensorStore({k: v.copy() for k, v in self._data.items()})

    # ------------------------------------------------------------ serialization

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(self._data)))
        for name, arr in self._data.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.astype("<f4", copy=False).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NamedTensorStore":
        view = memoryview(blob)
        if bytes(view[:4]) != MAGIC:
            raise StoreFormatError("bad magic, not a GSPC tensor store")
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise StoreFormatError(f"unsupported store version {version}")
        pos = 12
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            if dtype != DTYPE_F32:
                raise StoreFormatError(f"tensor {name!r}: unknown dtype tag {dtype}")
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            store._data[name] = arr.astype(np.float32)
        if pos != len(blob):
            raise StoreFormatError(f"{len(blob) - pos} trailing bytes after last tensor")
        return store

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "NamedTensorStore":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
