import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from jointcar.image_io import (
    INPUT_H, INPUT_W, PGMError, UnsupportedDepthError, UnsupportedFormatError, build_channel_stack,
    downsample2, edge_planes, normalize_channel, raw_channels, read_pgm, resize_bilinear,
    rotate_about_center, sobel_magnitude, tile_quadrants, window_to_input, write_pgm,
)

images_8bit = hnp.arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def test_read_p5_example():
    img = read_pgm(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    np.testing.assert_array_equal(img, [[0, 255], [128, 64]])


def test_read_p2_single_pixel():
    np.testing.assert_array_equal(read_pgm(b"P2\n1 1\n255\n0\n"), [[0]])


def test_ppm_rejected():
    with pytest.raises(UnsupportedFormatError):
        read_pgm(b"P6\n1 1\n255\n\x00\x00\x00")


def test_deep_pgm_rejected():
    with pytest.raises(UnsupportedDepthError):
        read_pgm(b"P5\n1 1\n65535\n\x00\x00")


def test_truncated_payload():
    with pytest.raises(PGMError):
        read_pgm(b"P5\n3 3\n255\n\x00\x01")
    with pytest.raises(PGMError):
        read_pgm(b"P2\n2 2\n255\n1 2 3")


def test_header_comments_accepted():
    data = b"P2\n# a comment\n2 # width\n1\n#another\n255\n7 9\n"
    np.testing.assert_array_equal(read_pgm(data), [[7, 9]])


def test_small_maxval_rescaled():
    np.testing.assert_allclose(read_pgm(b"P2\n2 1\n15\n0 15\n"), [[0, 255]])


@settings(max_examples=60, deadline=None)
@given(images_8bit)
def test_round_trip_and_cross_decode(img):
    p5, p2 = write_pgm(img, binary=True), write_pgm(img, binary=False)
    a, b = read_pgm(p5), read_pgm(p2)
    np.testing.assert_array_equal(a, img)
    np.testing.assert_array_equal(a, b)
    assert write_pgm(a) == p5 and write_pgm(b, binary=False) == p2


def test_resize_examples():
    const = np.full((5, 8), 7.0)
    np.testing.assert_allclose(resize_bilinear(const, 11, 3), 7.0, rtol=0, atol=1e-12)
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 255, (40, 100))
    np.testing.assert_array_equal(resize_bilinear(img, 40, 100), img)
    out = resize_bilinear(np.array([[0.0, 10.0], [0.0, 10.0]]), 2, 3)
    np.testing.assert_allclose(out[:, 1], 5.0, atol=1e-12)


def test_resize_rejects_zero_size():
    with pytest.raises(ValueError):
        resize_bilinear(np.ones((3, 3)), 0, 4)


def test_rotate_examples():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 255, (9, 13))
    np.testing.assert_array_equal(rotate_about_center(img, 0), img)
    np.testing.assert_allclose(rotate_about_center(np.full((6, 9), 3.5), 33), 3.5, atol=1e-12)
    dot = np.zeros((3, 3))
    dot[1, 1] = 255
    assert rotate_about_center(dot, 10)[1, 1] == 255


def test_rotate_center_fixed_point_exact():
    img = np.arange(25, dtype=float).reshape(5, 5)
    assert rotate_about_center(img, 10)[2, 2] == img[2, 2]


def test_rotate_direction_is_counter_clockwise():
    img = np.zeros((21, 21))
    img[10, 15:] = 1.0  # ray pointing right
    out = rotate_about_center(img, 90)
    assert out[5, 10] > 0.9 and out[15, 10] < 0.1  # now pointing up


@settings(max_examples=20, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 2 ** 31 - 1))
def test_rotate_inverse_on_smooth_images(deg, seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:40, 0:100] / 40.0
    a, b, c = rng.uniform(-1, 1, 3)
    img = 128 + 60 * np.sin(a * 3 * yy + b * 2 * xx + c)
    back = rotate_about_center(rotate_about_center(img, deg), -deg)
    band = 8
    err = np.abs(back - img)[band:-band, band:-band].max()
    assert err < 0.15 * (img.max() - img.min())


def test_rotate_rejects_large_angle():
    with pytest.raises(ValueError):
        rotate_about_center(np.ones((4, 4)), 91)


def test_sobel_examples():
    np.testing.assert_array_equal(sobel_magnitude(np.full((5, 6), 9.0)), 0)
    step = np.zeros((6, 8))
    step[:, 4:] = 1.0
    mag = sobel_magnitude(step)
    np.testing.assert_allclose(mag[1:-1, 3], 4.0)
    np.testing.assert_allclose(mag[1:-1, 4], 4.0)
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (7, 11))
    np.testing.assert_allclose(sobel_magnitude(img.T), sobel_magnitude(img).T, atol=1e-12)
    with pytest.raises(ValueError):
        sobel_magnitude(np.ones((2, 5)))


def test_sobel_matches_direct_convolution():
    from scipy.ndimage import correlate
    from jointcar.image_io import SOBEL_X
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 255, (12, 9))
    gx = correlate(img, SOBEL_X, mode="nearest")
    gy = correlate(img, SOBEL_X.T, mode="nearest")
    np.testing.assert_allclose(sobel_magnitude(img), np.hypot(gx, gy), atol=1e-9)


def test_channel_stack_shape_and_normalization():
    rng = np.random.default_rng(4)
    stack = build_channel_stack(rng.uniform(0, 255, (INPUT_H, INPUT_W)))
    assert stack.shape == (3, INPUT_H, INPUT_W)
    for ch in stack:
        assert abs(ch.mean()) < 1e-6
        assert abs(ch.var() - 1) < 1e-4


def test_zero_crop_gives_zero_stack():
    crop = np.zeros((INPUT_H, INPUT_W))
    assert not raw_channels(crop)[2].any()
    np.testing.assert_array_equal(build_channel_stack(crop), 0)


def test_gray_source_edge_maps():
    rng = np.random.default_rng(5)
    e_y, e_u, e_v, e_max = edge_planes(rng.uniform(0, 255, (INPUT_H, INPUT_W)))
    assert not e_u.any() and not e_v.any()
    np.testing.assert_array_equal(e_max, e_y)


def test_edge_max_dominates():
    rng = np.random.default_rng(6)
    edges = edge_planes(rng.uniform(0, 255, (INPUT_H, INPUT_W)))
    for e in edges[:3]:
        assert np.all(edges[3] >= e)


def test_channel_layout():
    rng = np.random.default_rng(7)
    crop = rng.uniform(0, 255, (INPUT_H, INPUT_W))
    raw = raw_channels(crop)
    np.testing.assert_array_equal(raw[0], crop)
    small = downsample2(crop)
    np.testing.assert_allclose(raw[1][:42, :14], small)
    assert not raw[1][:42, 14:].any() and not raw[1][42:].any()
    np.testing.assert_allclose(raw[2][:42, :14], sobel_magnitude(small))
    np.testing.assert_allclose(raw[2][42:, 14:], sobel_magnitude(small))


def test_downsample_block_average():
    a = np.arange(16, dtype=float).reshape(4, 4)
    np.testing.assert_allclose(downsample2(a), [[2.5, 4.5], [10.5, 12.5]])


def test_tile_quadrants_order():
    planes = [np.full((42, 14), v) for v in (1.0, 2.0, 3.0, 4.0)]
    t = tile_quadrants(planes)
    assert (t[0, 0], t[0, 27], t[83, 0], t[83, 27]) == (1, 2, 3, 4)


def test_constant_channel_guard():
    np.testing.assert_array_equal(normalize_channel(np.full((4, 4), 5.0)), 0)


def test_build_rejects_wrong_size():
    with pytest.raises(ValueError):
        build_channel_stack(np.zeros((40, 100)))


def test_window_to_input_geometry():
    win = np.zeros((40, 100))
    win[:, :50] = 255  # front half of the car bright
    out = window_to_input(win)
    assert out.shape == (INPUT_H, INPUT_W)
    # clockwise quarter turn: the window's left half lands on the top rows
    assert out[:40].mean() > 250 and out[-40:].mean() < 5


def test_batched_preprocessing_matches_single():
    rng = np.random.default_rng(8)
    wins = rng.uniform(0, 255, (4, 40, 100))
    batched = build_channel_stack(window_to_input(wins))
    single = np.stack([build_channel_stack(window_to_input(w)) for w in wins])
    np.testing.assert_allclose(batched, single, atol=1e-12)
