"""Ray-driven projector pair for parallel-beam and cone-beam scans.

Every detector pixel casts one ray through its center.  The ray is traced
through the voxel grid by Siddon's method: the parametric positions where
the ray crosses the x, y and z voxel planes are merged in order, and each
consecutive pair bounds one voxel whose contribution is the exact chord
length.  The chords are collected once per (grid, geometry) into a sparse
matrix, so forward projection is ``A @ x`` and back projection is ``A.T @ y``
and the pair is an exact adjoint by construction.

World frame: the rotation axis is the z axis through the origin.  At view
angle ``theta`` rays travel along ``d = (cos theta, sin theta, 0)``, detector
channels run along ``u = (-sin theta, cos theta, 0)`` and detector rows along
``+z``.  Sinogram data is shaped ``(num_views, det_rows, det_channels)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp

from .volume import Volume, VolumeFormatError

PARALLEL = "parallel3d"
CONEBEAM = "conebeam"
_MODES = (PARALLEL, CONEBEAM)


@dataclass(frozen=True)
class ScanGeometry:
    """Source/detector layout of one scan.

    ``det_pixel_size`` is measured at the detector.  For ``parallel3d`` this
    is the same as at the rotation axis; ``source_to_iso`` and
    ``source_to_det`` are only used for ``conebeam``.
    """

    mode: str
    view_angles: tuple
    det_rows: int
    det_channels: int
    det_pixel_size: float = 1.0
    source_to_iso: float = 0.0
    source_to_det: float = 0.0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        angles = tuple(float(a) for a in np.atleast_1d(self.view_angles))
        object.__setattr__(self, "view_angles", angles)
        if len(angles) < 1:
            raise ValueError("need at least one view")
        if not all(np.isfinite(angles)):
            raise ValueError("view angles must be finite")
        if self.det_rows < 1 or self.det_channels < 1:
            raise ValueError("detector needs at least one row and one channel")
        if not self.det_pixel_size > 0:
            raise ValueError("det_pixel_size must be positive")
        if self.mode == CONEBEAM and not 0 < self.source_to_iso < self.source_to_det:
            raise ValueError("conebeam requires 0 < source_to_iso < source_to_det")

    @classmethod
    def circular(cls, mode, num_views, det_rows, det_channels, span_deg=360.0, **kw):
        """Equally spaced views over ``span_deg`` degrees, endpoint excluded."""
        angles = np.deg2rad(span_deg) * np.arange(num_views) / num_views
        return cls(mode, tuple(angles), det_rows, det_channels, **kw)

    @property
    def num_views(self):
        return len(self.view_angles)

    @property
    def shape(self):
        return (self.num_views, self.det_rows, self.det_channels)


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Projection data of one scan plus the diagonal of its weight matrix."""

    geometry: ScanGeometry
    data: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = self.geometry.shape
        data = np.array(self.data, dtype=np.float64).reshape(shape)
        weights = np.array(self.weights, dtype=np.float64)
        if weights.size == data.size:
            weights = weights.reshape(shape)
        weights = np.broadcast_to(weights, shape).copy()
        if not (np.all(np.isfinite(data)) and np.all(np.isfinite(weights))):
            raise ValueError("sinogram data and weights must be finite")
        if np.any(weights < 0):
            raise ValueError("sinogram weights must be nonnegative")
        data.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "weights", weights)

    def with_weights(self, weights) -> "Sinogram":
        return Sinogram(self.geometry, self.data, weights)


# ---------------------------------------------------------------------------
# ray tracing


def ray_endpoints(g: ScanGeometry):
    """Start points and unit directions of every ray, both ``(M, 3)``.

    For parallel rays the start point is the ray's foot on the plane through
    the rotation axis and the ray is unbounded.  For cone-beam rays the start
    point is the source and the ray ends on the detector.
    Returns ``(starts, directions, lengths)``; ``lengths`` is ``inf`` for
    parallel rays.
    """
    th = np.asarray(g.view_angles)[:, None, None]
    ch = (np.arange(g.det_channels) - 0.5 * (g.det_channels - 1)) * g.det_pixel_size
    rw = (np.arange(g.det_rows) - 0.5 * (g.det_rows - 1)) * g.det_pixel_size
    ch = ch[None, None, :]
    rw = rw[None, :, None]
    shape = g.shape
    cos, sin = np.cos(th), np.sin(th)
    if g.mode == PARALLEL:
        start = np.stack(
            np.broadcast_arrays(-sin * ch, cos * ch, rw + 0 * th), axis=-1
        ).reshape(-1, 3)
        direction = np.stack(np.broadcast_arrays(cos, sin, 0 * th), axis=-1)
        direction = np.broadcast_to(direction, shape + (3,)).reshape(-1, 3)
        lengths = np.full(start.shape[0], np.inf)
        return start, np.ascontiguousarray(direction), lengths
    src = np.stack(np.broadcast_arrays(-g.source_to_iso * cos, -g.source_to_iso * sin, 0 * th), axis=-1)
    src = np.broadcast_to(src, shape + (3,)).reshape(-1, 3)
    dd = g.source_to_det - g.source_to_iso
    det = np.stack(
        np.broadcast_arrays(dd * cos - sin * ch, dd * sin + cos * ch, rw + 0 * th), axis=-1
    ).reshape(-1, 3)
    seg = det - src
    lengths = np.linalg.norm(seg, axis=1)
    return np.ascontiguousarray(src), seg / lengths[:, None], lengths


@numba.njit(cache=True)
def _trace(p0, d, tmax, lo, vs, n, out_idx, out_len, pos):
    """Siddon traversal of one ray; returns the new write position.

    With ``out_idx`` of size 0 only the number of chords is counted.
    """
    t0 = 0.0 if np.isfinite(tmax) else -np.inf
    t1 = tmax
    for a in range(3):
        hi = lo[a] + n[a] * vs
        if d[a] == 0.0:
            if p0[a] <= lo[a] or p0[a] >= hi:
                return pos
        else:
            ta = (lo[a] - p0[a]) / d[a]
            tb = (hi - p0[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if not t0 < t1:
        return pos

    # next plane crossing along each axis
    nxt = np.empty(3)
    step = np.empty(3, dtype=np.int64)
    k = np.empty(3, dtype=np.int64)
    for a in range(3):
        if d[a] == 0.0:
            nxt[a] = np.inf
            step[a] = 0
            k[a] = 0
            continue
        frac = (p0[a] + t0 * d[a] - lo[a]) / vs
        if d[a] > 0:
            step[a] = 1
            k[a] = int(np.floor(frac)) + 1
        else:
            step[a] = -1
            k[a] = int(np.ceil(frac)) - 1
        nxt[a] = (lo[a] + k[a] * vs - p0[a]) / d[a]

    nyx = n[1] * n[0]
    t = t0
    tol = 1e-12 * vs
    while t < t1:
        tn = t1
        for a in range(3):
            if nxt[a] < tn:
                tn = nxt[a]
        seg = tn - t
        if seg > tol:
            mid = t + 0.5 * seg
            flat = 0
            for a in (2, 1, 0):
                i = int(np.floor((p0[a] + mid * d[a] - lo[a]) / vs))
                if i < 0:
                    i = 0
                elif i >= n[a]:
                    i = n[a] - 1
                if a == 2:
                    flat = i * nyx
                elif a == 1:
                    flat += i * n[0]
                else:
                    flat += i
            if out_idx.size:
                out_idx[pos] = flat
                out_len[pos] = seg
            pos += 1
        for a in range(3):
            if nxt[a] <= tn:
                k[a] += step[a]
                nxt[a] = (lo[a] + k[a] * vs - p0[a]) / d[a]
        t = tn
    return pos


@numba.njit(cache=True)
def _build_csr(starts, dirs, tmax, lo, vs, n):
    m = starts.shape[0]
    indptr = np.zeros(m + 1, dtype=np.int64)
    empty_i = np.empty(0, dtype=np.int64)
    empty_f = np.empty(0)
    for r in range(m):
        indptr[r + 1] = indptr[r] + _trace(starts[r], dirs[r], tmax[r], lo, vs, n, empty_i, empty_f, 0)
    indices = np.empty(indptr[m], dtype=np.int64)
    values = np.empty(indptr[m])
    for r in range(m):
        _trace(starts[r], dirs[r], tmax[r], lo, vs, n, indices, values, indptr[r])
    return indptr, indices, values


_MATRIX_CACHE: dict = {}
_CACHE_LIMIT = 8


def system_matrix(grid: Volume, g: ScanGeometry):
    """Sparse ``(M, N)`` matrix of chord lengths, cached per grid/geometry.

    Returns ``(A, At)`` where ``At`` is the CSR form of the transpose.
    """
    key = (grid.dims, grid.voxel_size, grid.origin, g)
    hit = _MATRIX_CACHE.get(key)
    if hit is not None:
        return hit
    starts, dirs, lengths = ray_endpoints(g)
    vs = grid.voxel_size
    lo = np.array(grid.origin) - 0.5 * vs
    n = np.array(grid.dims, dtype=np.int64)
    indptr, indices, values = _build_csr(starts, dirs, lengths, lo, vs, n)
    nvox = int(np.prod(n))
    A = sp.csr_matrix((values, indices, indptr), shape=(starts.shape[0], nvox))
    A.sum_duplicates()
    At = A.T.tocsr()
    if len(_MATRIX_CACHE) >= _CACHE_LIMIT:
        _MATRIX_CACHE.pop(next(iter(_MATRIX_CACHE)))
    _MATRIX_CACHE[key] = (A, At)
    return A, At


def forward_project(v: Volume, g: ScanGeometry) -> Sinogram:
    """Line integrals of ``v`` along every detector ray; weights are 1."""
    A, _ = system_matrix(v, g)
    y = A @ v.data.ravel()
    return Sinogram(g, y, 1.0)


def back_project(s: Sinogram, template: Volume) -> Volume:
    """Adjoint of :func:`forward_project` onto ``template``'s grid."""
    _, At = system_matrix(template, s.geometry)
    return template.like(At @ s.data.ravel())


def apply_normal_operator(v: Volume, weights, g: ScanGeometry, sigma: float) -> Volume:
    """Return ``A^T W A v + v / sigma**2`` with ``W = diag(weights)``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    A, At = system_matrix(v, g)
    x = v.data.ravel()
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), g.shape).ravel()
    return v.like(At @ (w * (A @ x)) + x / sigma**2)


def normal_diagonal(grid: Volume, weights, g: ScanGeometry) -> np.ndarray:
    """Diagonal of ``A^T W A``, one value per voxel."""
    A, _ = system_matrix(grid, g)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), g.shape).ravel()
    return np.asarray(A.multiply(A).T @ w).ravel()


# ---------------------------------------------------------------------------
# MPFS sinogram files

SINO_MAGIC = b"MPFS"
SINO_VERSION = 1
# magic, version, mode, num_views, det_rows, det_channels, det_pixel_size, source_to_iso, source_to_det
_SINO_HEADER = struct.Struct("<4sIIIII3d")


def write_sinogram(path, s: Sinogram) -> None:
    """Write ``s`` as MPFS.

    Layout (little-endian): header, ``num_views`` float64 angles, then data
    and weights as float64 with channel fastest.
    """
    g = s.geometry
    header = _SINO_HEADER.pack(
        SINO_MAGIC, SINO_VERSION, _MODES.index(g.mode), g.num_views, g.det_rows,
        g.det_channels, g.det_pixel_size, g.source_to_iso, g.source_to_det,
    )
    body = (
        np.asarray(g.view_angles, dtype="<f8").tobytes()
        + np.ascontiguousarray(s.data, dtype="<f8").tobytes()
        + np.ascontiguousarray(s.weights, dtype="<f8").tobytes()
    )
    Path(path).write_bytes(header + body)


def read_sinogram(path) -> Sinogram:
    raw = Path(path).read_bytes()
    if raw[:4] != SINO_MAGIC:
        raise VolumeFormatError("magic", f"expected {SINO_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < _SINO_HEADER.size:
        raise VolumeFormatError("header", f"file holds {len(raw)} bytes, header needs {_SINO_HEADER.size}")
    _, version, mode, nv, nr, nc, pix, sti, std = _SINO_HEADER.unpack_from(raw)
    if version != SINO_VERSION:
        raise VolumeFormatError("version", f"unsupported version {version}, expected {SINO_VERSION}")
    if mode >= len(_MODES):
        raise VolumeFormatError("mode", f"unknown geometry mode code {mode}")
    m = nv * nr * nc
    need = 8 * (nv + 2 * m)
    body = raw[_SINO_HEADER.size:]
    if len(body) != need:
        raise VolumeFormatError("data", f"expected {need} payload bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype="<f8")
    try:
        g = ScanGeometry(_MODES[mode], tuple(arr[:nv]), nr, nc, pix, sti, std)
        return Sinogram(g, arr[nv:nv + m], arr[nv + m:])
    except ValueError as exc:
        raise VolumeFormatError("geometry", str(exc)) from exc
