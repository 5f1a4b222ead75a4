"""Voxel grids, volume arithmetic, error metrics and the MPFV file format.

Volume data is held as a float64 array of shape ``(nz, ny, nx)`` in C order,
which is the same as an ``nx*ny*nz`` vector with x varying fastest.  On disk
the samples are stored as little-endian float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MPFV"
FORMAT_VERSION = 1
# magic, version, nx, ny, nz, voxel_size, origin[3]
_HEADER = struct.Struct("<4sIIII4d")


class ShapeError(ValueError):
    """Raised when two volumes (or a volume and its data) disagree in shape."""


class VolumeFormatError(ValueError):
    """Raised when an MPFV/MPFS file is malformed.

    ``field`` names the offending header field or payload section.
    """

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def centered_origin(dims, voxel_size):
    """Origin that puts the grid's geometric center at world (0, 0, 0)."""
    return tuple(-0.5 * (n - 1) * voxel_size for n in dims)


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar attenuation field on a regular isotropic grid.

    Parameters
    ----------
    dims : tuple of int
        ``(nx, ny, nz)``.
    voxel_size : float
        Edge length of a voxel in mm.
    origin : tuple of float
        World coordinates (mm) of the center of voxel ``(0, 0, 0)``.
    data : ndarray
        Attenuation values in 1/mm, either shaped ``(nz, ny, nx)`` or flat
        with x fastest.  The array is copied and made read-only.
    """

    dims: tuple
    voxel_size: float
    origin: tuple
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ShapeError(f"dims must be three positive integers, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ShapeError(f"origin must have three components, got {self.origin}")
        data = np.array(self.data, dtype=np.float64)
        nx, ny, nz = dims
        if data.size != nx * ny * nz:
            raise ShapeError(f"data has {data.size} values, dims {dims} need {nx * ny * nz}")
        data = data.reshape(nz, ny, nx)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains NaN or Inf")
        data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, dims, voxel_size=1.0, origin=None):
        if origin is None:
            origin = centered_origin(dims, voxel_size)
        nx, ny, nz = dims
        return cls(dims, voxel_size, origin, np.zeros((nz, ny, nx)))

    @property
    def shape(self):
        """Array shape ``(nz, ny, nx)``."""
        return self.data.shape

    @property
    def center(self):
        """World coordinates of the grid's geometric center."""
        return np.array(self.origin) + 0.5 * (np.array(self.dims) - 1) * self.voxel_size

    def same_grid(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and self.voxel_size == other.voxel_size
            and self.origin == other.origin
        )

    def like(self, data) -> "Volume":
        """New volume on this grid holding ``data``."""
        return Volume(self.dims, self.voxel_size, self.origin, data)

    def as_stored(self) -> "Volume":
        """This volume rounded to float32, i.e. exactly what MPFV keeps on disk."""
        return self.like(self.data.astype(np.float32))

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.same_grid(other) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class VolumeStats:
    nrmse: float
    rmse: float
    max_abs_diff: float


def _check_dims(a: Volume, b: Volume):
    if a.dims != b.dims:
        raise ShapeError(f"dimension mismatch: {a.dims} vs {b.dims}")


def volume_axpy(a: float, x: Volume, y: Volume) -> Volume:
    """Return ``a*x + y``; grid metadata is taken from ``x``."""
    _check_dims(x, y)
    return x.like(a * x.data + y.data)


def nrmse(recon: Volume, reference: Volume) -> VolumeStats:
    """Error of ``recon`` relative to ``reference``.

    ``nrmse = ||recon - reference|| / ||reference||`` over all voxels.
    """
    _check_dims(recon, reference)
    ref_norm = np.linalg.norm(reference.data.ravel())
    if ref_norm == 0:
        raise ZeroDivisionError("nrmse undefined: reference volume is identically zero")
    diff = (recon.data - reference.data).ravel()
    err = np.linalg.norm(diff)
    return VolumeStats(
        nrmse=float(err / ref_norm),
        rmse=float(err / np.sqrt(diff.size)),
        max_abs_diff=float(np.max(np.abs(diff))),
    )


def write_volume(path, v: Volume) -> None:
    nx, ny, nz = v.dims
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, nx, ny, nz, v.voxel_size, *v.origin)
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise VolumeFormatError("magic", f"expected {MAGIC!r}, got {raw[:4]!r}")
        raise VolumeFormatError("header", f"file holds {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, nx, ny, nz, voxel_size, ox, oy, oz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError("version", f"unsupported version {version}, expected {FORMAT_VERSION}")
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError("dims", f"non-positive dimension in {(nx, ny, nz)}")
    if not voxel_size > 0:
        raise VolumeFormatError("voxel_size", f"must be positive, got {voxel_size}")
    count = nx * ny * nz
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * count:
        raise VolumeFormatError(
            "data", f"header declares {count} voxels ({4 * count} bytes), payload has {len(payload)} bytes"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    try:
        return Volume((nx, ny, nz), voxel_size, (ox, oy, oz), data)
    except ValueError as exc:
        raise VolumeFormatError("data", str(exc)) from exc
