"""Dense float32 tensor value type and its on-disk format.

Every stage boundary in the pipeline exchanges data as "V21T" files:

    bytes 0-3    magic b"V21T"
    bytes 4-7    format version, uint32 little-endian (currently 1)
    bytes 8-11   rank, uint32 LE (1..5)
    then         rank dim sizes, uint32 LE each
    then         prod(dims) float32 LE values, row-major (last index fastest)

The encoding is byte-exact across platforms: writing the same tensor
twice produces identical files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    NonFiniteError,
    TruncatedError,
    VersionError,
)

MAGIC = b"V21T"
VERSION = 1
MAX_RANK = 5


@dataclass(frozen=True)
class Tensor:
    """Immutable dense float32 array with explicit dims (rank 1..5)."""

    dims: tuple[int, ...]
    data: np.ndarray  # 1-D float32, row-major, len == prod(dims)

    def __post_init__(self):
        if not 1 <= len(self.dims) <= MAX_RANK:
            raise DataError(f"rank must be 1..{MAX_RANK}, got {len(self.dims)}")
        if any(d <= 0 for d in self.dims):
            raise DataError(f"dims must be positive, got {self.dims}")
        n = int(np.prod(self.dims))
        if self.data.shape != (n,):
            raise DataError(
                f"data length {self.data.shape} does not match dims {self.dims}"
            )
        if self.data.dtype != np.float32:
            raise DataError(f"data must be float32, got {self.data.dtype}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Tensor":
        a = np.ascontiguousarray(arr, dtype=np.float32)
        return cls(dims=tuple(int(d) for d in a.shape), data=a.reshape(-1))

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.dims)


def tensor_write(t: Tensor, path: str | Path) -> None:
    """Write ``t`` to ``path`` in V21T format (deterministic bytes)."""
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"refusing to write non-finite values to {path}")
    header = struct.pack(
        "<4sII", MAGIC, VERSION, len(t.dims)
    ) + struct.pack(f"<{len(t.dims)}I", *t.dims)
    payload = t.data.astype("<f4", copy=False).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise DataError(f"cannot write tensor to {path}: {exc}") from exc


def tensor_read(path: str | Path) -> Tensor:
    """Read a V21T file, validating magic, version, dims, and finiteness."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read tensor from {path}: {exc}") from exc

    if len(blob) < 12:
        raise TruncatedError(f"{path}: file shorter than fixed header")
    magic, version, rank = struct.unpack_from("<4sII", blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    if not 1 <= rank <= MAX_RANK:
        raise TruncatedError(f"{path}: rank {rank} outside 1..{MAX_RANK}")
    dims_end = 12 + 4 * rank
    if len(blob) < dims_end:
        raise TruncatedError(f"{path}: header truncated before dims")
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    if any(d == 0 for d in dims):
        raise TruncatedError(f"{path}: zero-sized dim in {dims}")
    n = 1
    for d in dims:
        n *= d
    if len(blob) != dims_end + 4 * n:
        raise TruncatedError(
            f"{path}: dims {dims} declare {n} values but payload has "
            f"{(len(blob) - dims_end) // 4}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=dims_end)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{path}: payload contains NaN or Inf")
    return Tensor(dims=tuple(int(d) for d in dims), data=data.astype(np.float32))


def write_array(arr: np.ndarray, path: str | Path) -> None:
    tensor_write(Tensor.from_array(arr), path)


def read_array(path: str | Path) -> np.ndarray:
    return tensor_read(path).to_array()
