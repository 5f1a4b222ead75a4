"""Rigid poses and their application to volumes by grid resampling.

A pose maps world point ``x`` to ``R (x - c) + c + t`` where ``c`` is the
geometric center of the volume it is applied to.  :func:`apply_pose` pulls
values back: output voxel ``q`` reads the input interpolated at the
preimage of ``q``.  Samples outside the grid read zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume

TRILINEAR = "trilinear"
CUBIC = "cubic_bspline"
QUINTIC = "quintic_bspline"
_SPLINE_ORDER = {TRILINEAR: 1, CUBIC: 3, QUINTIC: 5}


def rot_x(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Rotation (about the volume center) followed by a translation in mm."""

    rotation: np.ndarray
    translation: np.ndarray = np.zeros(3)
    interp: str = TRILINEAR

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), rtol=0, atol=1e-12):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-12:
            raise ValueError("rotation must be proper (det = +1)")
        if self.interp not in _SPLINE_ORDER:
            raise ValueError(f"interp must be one of {tuple(_SPLINE_ORDER)}, got {self.interp!r}")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, interp=TRILINEAR):
        return cls(np.eye(3), np.zeros(3), interp)

    @classmethod
    def from_euler(cls, rot_z_deg=0.0, rot_x_deg=0.0, translation=(0.0, 0.0, 0.0), interp=TRILINEAR):
        """Rotate about z (in the xy plane) first, then about x."""
        return cls(rot_x(rot_x_deg) @ rot_z(rot_z_deg), translation, interp)

    @property
    def is_identity(self):
        return np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation)

    def allclose(self, other: "RigidPose", atol=1e-12):
        return np.allclose(self.rotation, other.rotation, rtol=0, atol=atol) and np.allclose(
            self.translation, other.translation, rtol=0, atol=atol
        )


def inverse_pose(p: RigidPose) -> RigidPose:
    Rt = p.rotation.T
    return RigidPose(Rt, -Rt @ p.translation, p.interp)


def compose_poses(p1: RigidPose, p2: RigidPose) -> RigidPose:
    """Single pose equivalent to applying ``p1`` and then ``p2``.

    The interpolation mode of ``p2`` is kept.
    """
    R = p2.rotation @ p1.rotation
    # orthonormality drifts by ~1 ulp per product; snap back before validation
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidPose(R, p2.rotation @ p1.translation + p2.translation, p2.interp)


def _source_coordinates(v: Volume, p: RigidPose):
    """Input-grid index coordinates read by every output voxel, ``(3, nz, ny, nx)``."""
    nx, ny, nz = v.dims
    c = 0.5 * (np.array([nx, ny, nz]) - 1)
    Rt = p.rotation.T
    shift = Rt @ (p.translation / v.voxel_size)
    iz, iy, ix = np.meshgrid(np.arange(nz) - c[2], np.arange(ny) - c[1], np.arange(nx) - c[0], indexing="ij")
    q = np.stack([ix, iy, iz])  # xyz order, centered index units
    src = np.tensordot(Rt, q, axes=1) - shift[:, None, None, None] + c[:, None, None, None]
    return src[::-1]  # zyx order to match the array axes


def resample(v: Volume, p: RigidPose) -> Volume:
    """Pull-back resampling of ``v`` under ``p`` without any shortcut."""
    coords = _source_coordinates(v, p)
    order = _SPLINE_ORDER[p.interp]
    out = ndimage.map_coordinates(v.data, coords, order=order, mode="grid-constant", cval=0.0, prefilter=order > 1)
    return v.like(out)


def apply_pose(v: Volume, p: RigidPose) -> Volume:
    """Volume ``v`` moved into pose ``p``, on the same grid.

    The identity pose returns ``v`` itself with no resampling.
    """
    if p.is_identity:
        return v
    return resample(v, p)
