import numpy as np
import pytest

from mpf.phantom import Ellipsoid, PhantomSpec, PhantomSpecError, Plate, default_features, generate_phantom


def test_empty_spec_is_zero():
    v = generate_phantom(PhantomSpec((6, 5, 4)))
    assert v.shape == (4, 5, 6)
    assert not v.data.any()


def test_centered_ball_indicator():
    # even grid: voxel centers sit at +-0.5, so take the voxel next to the center
    r = 4.0
    v = generate_phantom(PhantomSpec((21, 21, 21), 1.0, (Ellipsoid((0, 0, 0), (r, r, r), 1.0),)))
    assert v.data[10, 10, 10] == 1.0
    assert v.data[10, 10, 10 + int(2 * r)] == 0.0
    # voxel count approximates the ball volume
    assert abs(v.data.sum() - 4 / 3 * np.pi * r**3) / (4 / 3 * np.pi * r**3) < 0.05


def test_deterministic():
    spec = PhantomSpec(features=default_features(), smoothing_mm=1.0)
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert a.data.tobytes() == b.data.tobytes()


def test_default_phantom_range_and_support():
    v = generate_phantom(PhantomSpec(features=default_features()))
    assert v.data.min() == 0.0
    assert 0.03 < v.data.max() <= 0.04
    # nothing within two voxels of the faces, so rotations about the center keep it inside
    inner = np.zeros_like(v.data, dtype=bool)
    inner[2:-2, 2:-2, 2:-2] = True
    assert not v.data[~inner].any()


def test_plate_holes_are_empty():
    hole = ((-2.0, -2.0), (2.0, -2.0), (0.0, 2.0))
    plate = Plate((0.0, 0.0, 0.0), (10.0, 10.0), 2.0, "z", 1.0, (hole,))
    v = generate_phantom(PhantomSpec((16, 16, 16), 1.0, (plate,)))
    # z = +-0.5 voxel planes lie inside the 2 mm thick plate
    assert v.data[8, 8, 8] == 0.0  # (0.5, 0.5, 0.5) is inside the triangle
    assert v.data[8, 8, 12] == 1.0  # (4.5, 0.5, 0.5) is solid plate
    assert v.data[11, 8, 8] == 0.0  # z = 3.5 is above the plate


def test_overlapping_plates_rejected():
    a = Plate((0.0, 0.0, 0.0), (10.0, 10.0), 2.0, "z", 1.0)
    b = Plate((1.0, 0.0, 0.0), (4.0, 4.0), 2.0, "x", 1.0)
    with pytest.raises(PhantomSpecError, match="overlap"):
        generate_phantom(PhantomSpec((16, 16, 16), 1.0, (a, b)))


def test_negative_total_rejected():
    feats = (Ellipsoid((0, 0, 0), (3, 3, 3), 0.01), Ellipsoid((0, 0, 0), (2, 2, 2), -0.02))
    with pytest.raises(PhantomSpecError, match="negative"):
        generate_phantom(PhantomSpec((10, 10, 10), 1.0, feats))


def test_smoothing_conserves_mass():
    sharp = generate_phantom(PhantomSpec(features=default_features()))
    smooth = generate_phantom(PhantomSpec(features=default_features(), smoothing_mm=1.0))
    assert abs(smooth.data.sum() - sharp.data.sum()) / sharp.data.sum() < 1e-5
    assert smooth.data.max() < sharp.data.max()
    with pytest.raises(PhantomSpecError):
        generate_phantom(PhantomSpec(smoothing_mm=-1.0))
