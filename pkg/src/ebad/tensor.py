"""Dense float64 tensors and the EBT1 on-disk format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_MAGIC = b"EBT1"


class Tensor:
    """Immutable dense array of finite float64 values, row-major.

    The wrapped numpy array is marked read-only; every constructor path
    rejects NaN/Inf so downstream numerics can assume finite data.
    """

    __slots__ = ("_data",)

    def __init__(self, data):
        # np.array (not ascontiguousarray) so rank-0 tensors stay rank 0
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        arr.setflags(write=False)
        object.__setattr__(self, "_data", arr)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        return float(self._data.reshape(()))

    def tolist(self):
        return self._data.tolist()

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float64))

    @classmethod
    def full(cls, shape, value: float) -> "Tensor":
        return cls(np.full(shape, value, dtype=np.float64))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def save_tensor(t: Tensor, path) -> None:
    """Write `t` to `path` in EBT1: magic, u32 rank, u32 dims, f64 payload.

    All integers and floats are little-endian; the payload is row-major.
    Round-trips are bit-exact.
    """
    shape = t.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(shape)))
        for dim in shape:
            f.write(struct.pack("<I", dim))
        f.write(t.data.astype("<f8", copy=False).tobytes())


def load_tensor(path) -> Tensor:
    """Read an EBT1 file written by save_tensor."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an EBT1 file (bad magic {raw[:4]!r})")
    (rank,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    dims = []
    for _ in range(rank):
        (d,) = struct.unpack_from("<I", raw, offset)
        dims.append(d)
        offset += 4
    count = 1
    for d in dims:
        count *= d
    payload = raw[offset:]
    if len(payload) != 8 * count:
        raise ValueError(
            f"{path}: payload holds {len(payload) // 8} doubles, header says {count}"
        )
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return Tensor(arr)
