import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sar2opt.geometry import (KeypointAnnotation, NoDetectionError, heatmap_to_keypoint, keypoints_to_angle,
                              render_target_heatmap, rotate_points)


@pytest.mark.parametrize("nose,tail,expected", [
    ((10, 5), (5, 5), 0.0),     # nose to the right
    ((5, 0), (5, 5), 90.0),     # nose up the screen
    ((0, 5), (5, 5), 180.0),
    ((5, 10), (5, 5), 270.0),
    ((0, 0), (3, 4), 126.86989764584402),
])
def test_angle_convention(nose, tail, expected):
    assert keypoints_to_angle(nose, tail) == pytest.approx(expected, abs=1e-9)


def test_angle_range_and_coincident():
    assert 0.0 <= keypoints_to_angle((5, 5 + 1e-12), (5 - 1, 5)) < 360.0
    with pytest.raises(ValueError):
        keypoints_to_angle((3, 3), (3, 3))


def test_annotation_roundtrip():
    kp = KeypointAnnotation((1.5, 2.0), (7.0, 3.25))
    assert KeypointAnnotation.from_array(kp.as_array()) == kp
    assert kp.angle == keypoints_to_angle(kp.nose_uv, kp.tail_uv)


@settings(max_examples=60, deadline=None)
@given(nx=st.floats(0, 63), ny=st.floats(0, 63), tx=st.floats(0, 63), ty=st.floats(0, 63),
       delta=st.floats(-720, 720))
def test_rotating_points_shifts_angle(nx, ny, tx, ty, delta):
    if math.hypot(nx - tx, ny - ty) < 1e-3:
        return
    before = keypoints_to_angle((nx, ny), (tx, ty))
    pts = rotate_points([(nx, ny), (tx, ty)], delta, (31.5, 31.5))
    after = keypoints_to_angle(pts[0], pts[1])
    d = abs((after - before - delta) % 360.0)
    assert min(d, 360 - d) < 1e-6


def test_rotate_quarter_turn_on_screen():
    # a point right of centre moves to directly above it
    p = rotate_points([(2.0, 0.0)], 90, (0.0, 0.0))[0]
    assert p == pytest.approx((0.0, -2.0), abs=1e-12)


def test_heatmap_peak_and_shape():
    h = render_target_heatmap((10, 6), (16, 32), sigma=2.0)
    assert h.shape == (16, 32)
    assert np.unravel_index(np.argmax(h), h.shape) == (6, 10)
    assert h.max() == pytest.approx(1.0)
    assert h[6, 12] == pytest.approx(math.exp(-4 / 8))


def test_heatmap_stride_and_clamp():
    h = render_target_heatmap((8, 4), (8, 8), sigma=1.0, stride=4)
    assert np.unravel_index(np.argmax(h), h.shape) == (1, 2)
    with pytest.warns(RuntimeWarning):
        h = render_target_heatmap((100, -3), (8, 8), sigma=1.0)
    assert np.unravel_index(np.argmax(h), h.shape) == (0, 7)
    with pytest.raises(ValueError):
        render_target_heatmap((1, 1), (8, 8), sigma=0.0)


@settings(max_examples=60, deadline=None)
@given(u=st.floats(2, 29), v=st.floats(2, 29), sigma=st.floats(1.0, 3.0))
def test_render_decode_roundtrip(u, v, sigma):
    h = render_target_heatmap((u, v), (32, 32), sigma)
    du, dv = heatmap_to_keypoint(h)
    # quadratic fit to a Gaussian peak is biased by less than a quarter cell
    assert abs(du - u) < 0.25 and abs(dv - v) < 0.25


def test_decode_integer_peak_exact_and_stride():
    h = render_target_heatmap((5, 9), (16, 16), 1.5)
    assert heatmap_to_keypoint(h) == pytest.approx((5.0, 9.0), abs=1e-9)
    assert heatmap_to_keypoint(h, stride=4) == pytest.approx((20.0, 36.0), abs=1e-9)


def test_decode_ties_and_failures():
    h = np.zeros((5, 5))
    h[1, 3] = h[3, 1] = 1.0
    assert heatmap_to_keypoint(h) == (3.0, 1.0)
    with pytest.raises(NoDetectionError):
        heatmap_to_keypoint(np.zeros((4, 4)))
    bad = np.ones((4, 4))
    bad[0, 0] = np.nan
    with pytest.raises(NoDetectionError):
        heatmap_to_keypoint(bad)


def test_heatmap_sigma_value_and_mass():
    sigma = 2.0
    h = render_target_heatmap((20, 16), (32, 40), sigma)
    assert h[16, 20] == 1.0
    assert h[16, 22] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert h[16, 22] == pytest.approx(0.60653, abs=1e-5)
    assert h.sum() == pytest.approx(2 * math.pi * sigma ** 2, rel=0.05)


def test_render_decode_anchor_case():
    du, dv = heatmap_to_keypoint(render_target_heatmap((20, 12), (32, 32), 2.0))
    assert abs(du - 20) <= 0.5 and abs(dv - 12) <= 0.5


def _centroid(h, radius=3):
    i, j = np.unravel_index(np.argmax(h), h.shape)
    win = h[i - radius:i + radius + 1, j - radius:j + radius + 1]
    vv, uu = np.mgrid[i - radius:i + radius + 1, j - radius:j + radius + 1]
    return (win * uu).sum() / win.sum(), (win * vv).sum() / win.sum()


def test_decode_error_against_centroid_oracle():
    rng = np.random.default_rng(11)
    ours, oracle = [], []
    for u, v in rng.uniform(6, 26, size=(100, 2)):
        h = render_target_heatmap((u, v), (32, 32), 2.0)
        ours.append(np.hypot(*(np.array(heatmap_to_keypoint(h)) - (u, v))))
        oracle.append(np.hypot(*(np.array(_centroid(h)) - (u, v))))
    assert np.mean(ours) <= 0.5
    assert np.mean(oracle) <= 0.5  # the oracle itself is sane at this sigma
