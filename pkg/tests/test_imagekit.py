import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ghhdet.imagekit import (
    DecodeError,
    DimensionError,
    FeatureStack,
    compute_feature_stack,
    convolve2d,
    convolve_separable,
    decode_image,
    decode_pnm,
    encode_ppm,
    fit_normalization,
    raw_features,
    read_image,
    rgb_to_luv,
    write_image,
)


def test_decode_two_pixel_ppm():
    data = b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 0])
    img = decode_pnm(data)
    assert img.shape == (1, 2, 3)
    assert img[0, 0].tolist() == [255, 0, 0]
    assert img[0, 1].tolist() == [0, 0, 0]


def test_decode_with_comment_and_grey():
    data = b"P5\n# a comment\n2 2\n255\n" + bytes([0, 10, 20, 30])
    img = decode_pnm(data)
    assert img.shape == (2, 2, 3)
    assert img[1, 1].tolist() == [30, 30, 30]


def test_truncated_payload_names_offset():
    data = b"P6\n2 2\n255\n" + bytes(5)
    with pytest.raises(DecodeError) as err:
        decode_pnm(data)
    assert err.value.offset == len(data)
    assert "offset" in str(err.value)


@pytest.mark.parametrize("data", [b"", b"P3\n1 1\n255\n0 0 0", b"P6\n1 1\n65535\n" + bytes(6), b"P6\nx 1\n255\n"])
def test_malformed_headers(data):
    with pytest.raises(DecodeError):
        decode_image(data)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_ppm_round_trip(img):
    encoded = encode_ppm(img)
    assert encode_ppm(decode_pnm(encoded)) == encoded
    np.testing.assert_array_equal(decode_pnm(encoded), img)


def test_png_through_pillow(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_image(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)


def _luv_of(rgb):
    L, U, V = rgb_to_luv(np.array(rgb, dtype=np.uint8).reshape(1, 1, 3))
    return float(L[0, 0]), float(U[0, 0]), float(V[0, 0])


def test_luv_black_and_white():
    assert _luv_of([0, 0, 0]) == (0.0, 0.0, 0.0)
    L, U, V = _luv_of([255, 255, 255])
    # the standard 7-digit sRGB matrix has a luminance row summing to 1.0000001
    assert L == pytest.approx(100.0, abs=1e-4)
    assert abs(U) <= 1e-3 and abs(V) <= 1e-3


def test_luv_mid_grey_against_colorimetry():
    # independent evaluation: Y from the sRGB transfer curve, L* from the CIE formula
    c = 119 / 255.0
    y = ((c + 0.055) / 1.055) ** 2.4
    expect = 116.0 * y ** (1.0 / 3.0) - 16.0
    L, U, V = _luv_of([119, 119, 119])
    assert L == pytest.approx(expect, abs=1e-4)
    assert abs(U) <= 1e-3 and abs(V) <= 1e-3


def test_luv_matches_skimage(rng):
    skcolor = pytest.importorskip("skimage.color")
    img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
    ref = skcolor.rgb2luv(img)  # D65, 2 degree observer by default
    L, U, V = rgb_to_luv(img)
    # scikit-image uses the older 6-digit sRGB matrix; the two agree to within 0.01
    np.testing.assert_allclose(np.stack([L, U, V], -1), ref, atol=2e-2)


def test_constant_image_has_no_gradient():
    img = np.full((9, 11, 3), 77, dtype=np.uint8)
    fs = compute_feature_stack(img)
    for name in ("gx", "gy", "gmag"):
        assert np.all(fs.channel(name) == 0)


def test_horizontal_ramp():
    ramp = np.tile(np.arange(0, 200, 10, dtype=np.uint8)[None, :, None], (6, 1, 3))
    fs = compute_feature_stack(ramp)
    L = fs.channel("L")
    interior = fs.channel("gx")[:, 1:-1]
    expect = 0.5 * (L[:, 2:] - L[:, :-2])
    np.testing.assert_allclose(interior, expect, atol=1e-12)
    assert np.all(fs.channel("gy") == 0)


def test_gradient_magnitude_consistent_after_normalization(rng):
    imgs = [rng.integers(0, 256, (8, 8, 3)).astype(np.uint8) for _ in range(3)]
    norm = fit_normalization([raw_features(i) for i in imgs])
    for img in imgs:
        for fs in (compute_feature_stack(img), compute_feature_stack(img, norm)):
            np.testing.assert_allclose(fs.channel("gmag"), np.hypot(fs.channel("gx"), fs.channel("gy")), atol=1e-12)


def test_feature_stack_shape_checked():
    with pytest.raises(DimensionError):
        FeatureStack(np.zeros((5, 4, 4)))


def test_delta_filter_is_identity(rng):
    img = rng.normal(size=(12, 9))
    delta = np.zeros((5, 5))
    delta[2, 2] = 1.0
    for mode in ("same-replicate", "circular"):
        np.testing.assert_array_equal(convolve2d(img, delta, mode), img)


def test_valid_mode_sum_of_taps():
    out = convolve2d(np.ones((3, 3)), np.ones((3, 3)), "valid")
    assert out.shape == (1, 1) and out[0, 0] == 9.0


def test_valid_mode_filter_too_large():
    with pytest.raises(DimensionError):
        convolve2d(np.ones((3, 3)), np.ones((5, 5)), "valid")


def _dft_circular(img, f):
    h, w = img.shape
    r = f.shape[0] // 2
    kern = np.zeros((h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            kern[dy % h, dx % w] += f[dy + r, dx + r]
    return np.real(np.fft.ifft2(np.fft.fft2(img) * np.fft.fft2(kern)))


def _direct_circular(img, f):
    h, w = img.shape
    r = f.shape[0] // 2
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    acc += f[dy + r, dx + r] * img[(y - dy) % h, (x - dx) % w]
            out[y, x] = acc
    return out


def test_circular_convolution_theorem(rng):
    for _ in range(5):
        img = rng.normal(size=(16, 16))
        f = rng.normal(size=(5, 5))
        out = convolve2d(img, f, "circular")
        ref = _dft_circular(img, f)
        assert np.max(np.abs(out - ref)) <= 1e-10
        assert np.linalg.norm(out - ref) <= 1e-9 * np.linalg.norm(ref)
    np.testing.assert_allclose(convolve2d(img, f, "circular"), _direct_circular(img, f), atol=1e-10)


def test_circular_filter_larger_than_image(rng):
    img = rng.normal(size=(4, 6))
    f = rng.normal(size=(7, 7))
    np.testing.assert_allclose(convolve2d(img, f, "circular"), _direct_circular(img, f), atol=1e-10)


def test_replicate_border_against_padding(rng):
    img = rng.normal(size=(10, 8))
    f = rng.normal(size=(3, 3))
    padded = np.pad(img, 1, mode="edge")
    ref = np.zeros_like(img)
    for y in range(10):
        for x in range(8):
            ref[y, x] = np.sum(padded[y : y + 3, x : x + 3] * f[::-1, ::-1])
    np.testing.assert_allclose(convolve2d(img, f, "same-replicate"), ref, atol=1e-12)


def test_linearity(rng):
    x, y = rng.normal(size=(2, 20, 20))
    f = rng.normal(size=(5, 5))
    for mode in ("valid", "same-replicate", "circular"):
        lhs = convolve2d(2.5 * x - 1.5 * y, f, mode)
        rhs = 2.5 * convolve2d(x, f, mode) - 1.5 * convolve2d(y, f, mode)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_separable_matches_dense(rng):
    img = rng.normal(size=(23, 17))
    row, col = rng.normal(size=(2, 7))
    for mode in ("valid", "same-replicate", "circular"):
        np.testing.assert_allclose(convolve_separable(img, row, col, mode), convolve2d(img, np.outer(col, row), mode), atol=1e-10)
    np.testing.assert_allclose(convolve_separable(img, np.ones(5), np.ones(5)), convolve2d(img, np.ones((5, 5))), atol=1e-10)
    np.testing.assert_array_equal(convolve_separable(img, [1.0], [1.0]), img)


def test_separable_rejects_even_lengths():
    with pytest.raises(DimensionError):
        convolve_separable(np.ones((5, 5)), np.ones(4), np.ones(4))


def test_even_filter_rejected():
    with pytest.raises(DimensionError):
        convolve2d(np.ones((5, 5)), np.ones((2, 2)))
