import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crossview.geometry import (
    GroundImage,
    MetersPerPixel,
    Pose,
    angle_diff,
    crop_fov,
    decompose_error,
    make_label,
    normalize_heading,
    shift_panorama,
)


def test_pose_normalizes_heading():
    assert Pose(1, 2, -90).heading == 270
    assert Pose(1, 2, 720).heading == 0
    assert normalize_heading(359.999999) < 360


@pytest.mark.parametrize("a,b,d", [(350, 10, 20), (90, 90, 0), (0, 180, 180), (10, 350, 20), (-30, 30, 60)])
def test_angle_diff_examples(a, b, d):
    assert angle_diff(a, b) == pytest.approx(d)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_angle_diff_range_and_symmetry(a, b):
    d = angle_diff(a, b)
    assert 0 <= d <= 180
    assert d == pytest.approx(angle_diff(b, a))


def test_scale_must_be_positive():
    with pytest.raises(ValueError):
        MetersPerPixel(0.0)


def test_label_normalized_with_peak_at_gt():
    lab = make_label(Pose(20.7, 9.2, 0), 64, 2.5)
    assert lab.map.sum() == pytest.approx(1.0, abs=1e-5)
    assert np.unravel_index(np.argmax(lab.map), lab.map.shape) == (20, 9)
    assert lab.gt_pixel == (20, 9)


def test_label_neighbor_ratio():
    s = 2.5
    lab = make_label(Pose(30, 30, 0), 64, s)
    assert lab.map[30, 31] / lab.map[30, 30] == pytest.approx(math.exp(-1 / (2 * s * s)), rel=1e-5)


def test_label_narrow_sigma_is_nearly_one_hot():
    lab = make_label(Pose(12.5, 40.5, 0), 64, 0.25)
    assert lab.map[12, 40] > 0.99


@pytest.mark.parametrize("u,v", [(-0.1, 3), (3, 64), (64, 0)])
def test_label_rejects_outside(u, v):
    with pytest.raises(ValueError):
        make_label(Pose(u, v, 0), 64)


def _stripes(h=4, w=64):
    p = np.zeros((h, w, 3), np.float32)
    p[..., 0] = np.arange(w)[None, :]
    p[..., 1] = np.arange(h)[:, None]
    return p


def test_shift_identity_cases():
    p = _stripes()
    np.testing.assert_array_equal(shift_panorama(p, 0), p)
    np.testing.assert_array_equal(shift_panorama(p, 360), p)


def test_shift_loop_oracle():
    p = _stripes(3, 360)
    out = shift_panorama(p, 90)
    for c in range(360):
        np.testing.assert_array_equal(out[:, c], p[:, (c + 90) % 360])


def test_shift_turning_right_brings_right_side_to_center():
    p = _stripes()
    # a 90 deg clockwise turn puts what was 16 columns right of center at the center
    assert shift_panorama(p, 90)[0, 32, 0] == 48


def test_shift_rejects_partial_fov():
    with pytest.raises(ValueError):
        shift_panorama(GroundImage(_stripes(), 180.0), 10)


def test_crop_examples():
    p = _stripes()
    np.testing.assert_array_equal(crop_fov(p, 360).pixels, p)
    c = crop_fov(p, 180)
    assert c.fov == 180 and c.width == 32
    np.testing.assert_array_equal(c.pixels[0, :, 0], np.arange(16, 48))


def test_crop_keeps_center_column():
    p = _stripes()
    for fov in (45, 90, 135, 270):
        c = crop_fov(p, fov)
        assert c.pixels[0, c.width // 2, 0] == 32


def test_crop_rejects_wider_than_source():
    with pytest.raises(ValueError):
        crop_fov(GroundImage(_stripes(), 180.0), 270)
    with pytest.raises(ValueError):
        crop_fov(_stripes(), 0)


@given(st.integers(0, 63), st.sampled_from([45.0, 90.0, 180.0, 225.0, 360.0]))
def test_crop_after_shift_matches_direct_columns(m, fov):
    p = _stripes()
    got = crop_fov(shift_panorama(p, m * 360 / 64), fov).pixels[0, :, 0]
    w = int(round(64 * fov / 360))
    expected = [(32 - w // 2 + k + m) % 64 for k in range(w)]
    np.testing.assert_array_equal(got, expected)


def test_decompose_examples():
    assert decompose_error(Pose(5, 5, 30), Pose(5, 5, 30), 1.0) == (0.0, 0.0)
    lat, lon = decompose_error(Pose(10, 13, 0), Pose(10, 10, 0), MetersPerPixel(1.0))
    assert lat == pytest.approx(3) and lon == pytest.approx(0, abs=1e-12)
    lat, lon = decompose_error(Pose(7, 10, 0), Pose(10, 10, 0), 2.0)
    assert lat == pytest.approx(0, abs=1e-12) and lon == pytest.approx(6)


def test_decompose_rotation_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        gt = Pose(*rng.uniform(0, 64, 2), rng.uniform(0, 360))
        pred = Pose(*rng.uniform(0, 64, 2), 0)
        s = rng.uniform(0.5, 2)
        # east/north components, rotated into the heading frame
        east = (pred.v - gt.v) * s
        north = -(pred.u - gt.u) * s
        t = math.radians(gt.heading)
        fwd = east * math.sin(t) + north * math.cos(t)
        right = east * math.cos(t) - north * math.sin(t)
        lat, lon = decompose_error(pred, gt, s)
        assert lat == pytest.approx(abs(right), abs=1e-6)
        assert lon == pytest.approx(abs(fwd), abs=1e-6)
