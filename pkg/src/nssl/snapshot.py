"""Binary snapshot files.

Layout (little endian)::

    b"NSSL"  uint32 version  uint32 ndim  uint32 ncomp
    uint32 dims[ndim]  float64 box_lengths[ndim]
    float64 samples[ncomp * prod(dims)]   # component-major, then C order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .spectral import Grid, SpectralField

MAGIC = b"NSSL"
VERSION = 1


@dataclass(frozen=True)
class SnapshotInfo:
    version: int
    ndim: int
    ncomp: int
    dims: tuple[int, ...]
    box_lengths: tuple[float, ...]


def write_snapshot(path, field: SpectralField) -> Path:
    path = Path(path)
    g = field.grid
    data = np.ascontiguousarray(field.physical(), dtype="<f8")
    header = MAGIC + struct.pack("<III", VERSION, g.ndim, field.ncomp)
    header += struct.pack(f"<{g.ndim}I", *g.dims)
    header += struct.pack(f"<{g.ndim}d", *g.box_lengths)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="C"))
    return path


def _read_header(fh) -> SnapshotInfo:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ConfigurationError(f"not a snapshot file (magic {magic!r})")
    version, ndim, ncomp = struct.unpack("<III", fh.read(12))
    if version != VERSION:
        raise ConfigurationError(f"unsupported snapshot version {version}")
    if ndim not in (2, 3):
        raise ConfigurationError(f"bad ndim {ndim} in snapshot")
    dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    box = struct.unpack(f"<{ndim}d", fh.read(8 * ndim))
    return SnapshotInfo(version, ndim, ncomp, tuple(dims), tuple(box))


def snapshot_info(path) -> SnapshotInfo:
    with open(path, "rb") as fh:
        return _read_header(fh)


def read_snapshot(path, dealias_fraction: float = 2.0 / 3.0) -> SpectralField:
    with open(path, "rb") as fh:
        info = _read_header(fh)
        count = info.ncomp * int(np.prod(info.dims))
        data = np.frombuffer(fh.read(8 * count), dtype="<f8")
    if data.size != count:
        raise ConfigurationError(f"truncated snapshot: expected {count} samples, found {data.size}")
    grid = Grid(info.dims, info.box_lengths, dealias_fraction)
    return SpectralField.from_physical(grid, data.reshape((info.ncomp,) + info.dims).astype(float))
