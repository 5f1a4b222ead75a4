"""Analytic test objects: superposed ellipsoids and thin plates with triangular holes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import Volume, centered_origin


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipsoid:
    """Additive ellipsoid; ``angle_deg`` rotates its axes about z."""

    center: tuple
    semi_axes: tuple
    value: float
    angle_deg: float = 0.0

    def mask(self, x, y, z):
        a = np.deg2rad(self.angle_deg)
        dx, dy, dz = x - self.center[0], y - self.center[1], z - self.center[2]
        u = np.cos(a) * dx + np.sin(a) * dy
        v = -np.sin(a) * dx + np.cos(a) * dy
        ax, ay, az = self.semi_axes
        return (u / ax) ** 2 + (v / ay) ** 2 + (dz / az) ** 2 <= 1.0

    def bounds(self):
        r = max(self.semi_axes)
        c = np.asarray(self.center, dtype=float)
        return c - r, c + r


# in-plane coordinates (first, second) for each plate normal
_PLATE_AXES = {"x": (1, 2), "y": (0, 2), "z": (0, 1)}


@dataclass(frozen=True)
class Plate:
    """Axis-aligned thin slab with triangular holes cut through it.

    ``size`` is the extent along the two in-plane axes (for normal ``y``
    these are x and z); hole vertices are in mm relative to the plate center
    in those same in-plane coordinates.
    """

    center: tuple
    size: tuple
    thickness: float
    normal: str
    value: float
    holes: tuple = field(default_factory=tuple)

    def mask(self, x, y, z):
        pts = (x, y, z)
        n = "xyz".index(self.normal)
        i, j = _PLATE_AXES[self.normal]
        p = pts[i] - self.center[i]
        q = pts[j] - self.center[j]
        inside = (
            (np.abs(pts[n] - self.center[n]) <= 0.5 * self.thickness)
            & (np.abs(p) <= 0.5 * self.size[0])
            & (np.abs(q) <= 0.5 * self.size[1])
        )
        for tri in self.holes:
            inside &= ~_in_triangle(p, q, np.asarray(tri, dtype=float))
        return inside

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        half = np.empty(3)
        half["xyz".index(self.normal)] = 0.5 * self.thickness
        i, j = _PLATE_AXES[self.normal]
        half[i], half[j] = 0.5 * self.size[0], 0.5 * self.size[1]
        return c - half, c + half


def _in_triangle(p, q, tri):
    def edge(a, b):
        return (b[0] - a[0]) * (q - a[1]) - (b[1] - a[1]) * (p - a[0])

    e0, e1, e2 = edge(tri[0], tri[1]), edge(tri[1], tri[2]), edge(tri[2], tri[0])
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    voxel_size: float = 1.0
    features: tuple = ()
    smoothing_mm: float = 0.0


def default_features():
    """Body with two inner organs, a dense bead, and two perforated plates.

    Stays within 14 mm of the center so that rotations about the center of a
    32 mm grid do not clip it.  Peak attenuation is 0.04 /mm.
    """
    return (
        Ellipsoid((0.0, 0.0, 0.0), (12.0, 9.5, 13.0), 0.01, 15.0),
        Ellipsoid((-4.5, 2.0, -3.0), (4.0, 3.0, 5.5), 0.008, -20.0),
        Ellipsoid((4.5, -2.5, -4.0), (3.0, 2.5, 4.0), 0.014),
        Ellipsoid((0.5, 5.5, -8.0), (2.0, 2.0, 2.0), 0.03),
        Plate(
            (0.0, -1.0, 7.5), (15.0, 6.0), 2.0, "y", 0.03,
            holes=(((-5.0, 0.5), (-2.0, 0.5), (-3.5, 2.5)), ((2.0, 0.5), (5.0, 0.5), (3.5, 2.5))),
        ),
        Plate(
            (0.0, 4.0, 3.0), (6.0, 8.0), 2.0, "z", 0.02,
            holes=(((-2.0, -2.0), (2.0, -2.0), (0.0, 1.5)),),
        ),
    )


def _check_overlaps(features):
    plates = [f for f in features if isinstance(f, Plate)]
    for a in range(len(plates)):
        for b in range(a + 1, len(plates)):
            lo1, hi1 = plates[a].bounds()
            lo2, hi2 = plates[b].bounds()
            if np.all(lo1 < hi2) and np.all(lo2 < hi1):
                raise PhantomSpecError(f"plates {a} and {b} overlap")


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Rasterize ``spec`` by evaluating each feature at voxel centers.

    A positive ``smoothing_mm`` then applies a Gaussian blur of that standard
    deviation (zero outside the grid), giving a band-limited object whose
    rotations are well represented on the grid.  Values are rounded to
    float32 so the volume survives an MPFV round trip unchanged.
    """
    if not spec.smoothing_mm >= 0:
        raise PhantomSpecError("smoothing_mm must be non-negative")
    features = tuple(spec.features)
    _check_overlaps(features)
    nx, ny, nz = spec.dims
    origin = centered_origin(spec.dims, spec.voxel_size)
    vs = spec.voxel_size
    z, y, x = np.meshgrid(
        origin[2] + vs * np.arange(nz), origin[1] + vs * np.arange(ny), origin[0] + vs * np.arange(nx),
        indexing="ij",
    )
    data = np.zeros((nz, ny, nx))
    for f in features:
        data += f.value * f.mask(x, y, z)
    if data.size and data.min() < 0:
        raise PhantomSpecError(
            f"overlapping features produce negative attenuation ({data.min():.4g} /mm)"
        )
    if spec.smoothing_mm > 0:
        data = ndimage.gaussian_filter(data, spec.smoothing_mm / vs, mode="constant", truncate=4.0)
    return Volume(spec.dims, vs, origin, data.astype(np.float32))
