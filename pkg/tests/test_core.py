import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rasterfix.core import (BadMagicError, DimensionMismatchError, ImageDomain, ImageSeries,
                            PixelImage, TruncatedPayloadError, average_frames, bilinear_interpolate,
                            load_image, load_pgm, load_series, pixel_coordinates, sample_bilinear,
                            save_image, save_pgm, save_series)


def bilinear_oracle(v, p):
    """Weighted sum over all pixels with tent weights in pixel-index units."""
    N, M = v.shape
    a = min(max(p[0] * M - 0.5, 0.0), M - 1.0)
    b = min(max(p[1] * N - 0.5, 0.0), N - 1.0)
    total = 0.0
    for j in range(N):
        for i in range(M):
            w = max(0.0, 1 - abs(a - i)) * max(0.0, 1 - abs(b - j))
            total += w * v[j, i]
    return total


def test_pixel_image_rejects_bad_input():
    with pytest.raises(ValueError):
        PixelImage(np.zeros((1, 5)))
    with pytest.raises(ValueError):
        PixelImage(np.array([[0.0, np.nan], [1.0, 2.0]]))
    img = PixelImage(np.zeros((3, 4)))
    assert (img.width, img.height) == (4, 3)
    with pytest.raises(ValueError):
        img.values[0, 0] = 1.0


def test_series_invariants():
    with pytest.raises(ValueError):
        ImageSeries(())
    with pytest.raises(ValueError):
        ImageSeries((np.zeros((3, 3)), np.zeros((3, 4))))
    with pytest.raises(ValueError):
        ImageSeries((-np.ones((3, 3)),))
    with pytest.raises(ValueError):
        ImageSeries((np.zeros((3, 3)),), dwell_time=0.0)
    s = ImageSeries((np.zeros((3, 3)), np.ones((3, 3))))
    assert len(s.subset([1])) == 1 and s.subset([1]).frames[0].values[0, 0] == 1.0


def test_pixel_centres_strictly_increasing():
    X, Y = pixel_coordinates(4, 3)
    assert np.allclose(X[0], [0.125, 0.375, 0.625, 0.875])
    assert np.allclose(Y[:, 0], [1 / 6, 0.5, 5 / 6])
    assert np.all(np.diff(X, axis=1) > 0) and np.all(np.diff(Y, axis=0) > 0)


def test_interpolation_reproduces_nodes(rng):
    v = rng.uniform(size=(5, 7))
    X, Y = pixel_coordinates(7, 5)
    assert np.array_equal(sample_bilinear(v, X, Y), v)


def test_cell_midpoint():
    v = np.array([[0.0, 0.0], [2.0, 2.0]])
    assert bilinear_interpolate(PixelImage(v), (0.5, 0.5)) == 1.0


def test_interpolation_matches_oracle(rng):
    v = rng.uniform(size=(5, 5))
    for _ in range(50):
        p = rng.uniform(-0.1, 1.1, 2)
        assert abs(bilinear_interpolate(v, p) - bilinear_oracle(v, p)) <= 1e-14


def test_interpolation_linear_along_grid_lines(rng):
    v = rng.uniform(size=(4, 4))
    y = 1.5 / 4
    t = np.linspace(0, 1, 11)
    x = (1.5 + t) / 4
    expect = v[1, 1] + t * (v[1, 2] - v[1, 1])
    assert np.allclose(sample_bilinear(v, x, np.full_like(x, y)), expect, atol=1e-14)


def test_interpolation_rejects_nonfinite():
    with pytest.raises(ValueError):
        bilinear_interpolate(np.zeros((2, 2)), (np.nan, 0.5))


def test_bilinear_position_gradient(rng):
    v = rng.uniform(size=(6, 6))
    p = rng.uniform(0.15, 0.85, (2, 20))
    _, gx, gy = sample_bilinear(v, p[0], p[1], with_grad=True)
    h = 1e-7
    fdx = (sample_bilinear(v, p[0] + h, p[1]) - sample_bilinear(v, p[0] - h, p[1])) / (2 * h)
    fdy = (sample_bilinear(v, p[0], p[1] + h) - sample_bilinear(v, p[0], p[1] - h)) / (2 * h)
    assert np.allclose(gx, fdx, rtol=1e-6, atol=1e-6)
    assert np.allclose(gy, fdy, rtol=1e-6, atol=1e-6)


def test_average_identical_frames(rng):
    f = rng.uniform(size=(4, 4))
    for m in ("mean", "median"):
        np.testing.assert_allclose(average_frames([f, f, f], m).values, f, rtol=1e-15)


def test_median_rejects_outlier():
    frames = [np.zeros((2, 2)), np.zeros((2, 2)), np.full((2, 2), 9.0)]
    assert np.all(average_frames(frames, "median").values == 0.0)


def test_median_matches_sort_oracle(rng):
    stack = rng.uniform(size=(4, 4, 4))
    out = average_frames(list(stack), "median").values
    for j in range(4):
        for i in range(4):
            s = sorted(stack[:, j, i])
            assert out[j, i] == 0.5 * (s[1] + s[2])


def test_weighted_average_and_invalid_fill():
    stack = np.array([np.full((2, 2), 1.0), np.full((2, 2), 4.0)])
    w = np.ones_like(stack)
    w[1, 0, 0] = 3.0
    w[:, 1, 1] = 0.0
    mean = average_frames(list(stack), "mean", w).values
    assert mean[0, 0] == pytest.approx((1 + 12) / 4)
    assert mean[0, 1] == pytest.approx(2.5)
    # zero total weight: filled with the mean of the valid pixels
    assert mean[1, 1] == pytest.approx((13 / 4 + 2.5 + 2.5) / 3)
    med = average_frames(list(stack), "median", [ImageDomain(2, 2, w[0]), ImageDomain(2, 2, w[1])])
    assert med.values[0, 0] == 4.0 and med.values[0, 1] == 2.5


def test_average_errors():
    with pytest.raises(ValueError):
        average_frames([])
    with pytest.raises(ValueError):
        average_frames([np.zeros((2, 2))], "mode")


@given(arrays(np.float64, (5, 3, 3), elements=st.floats(0, 100)), st.permutations(range(5)))
def test_average_permutation_invariant(stack, perm):
    for m in ("mean", "median"):
        a = average_frames(list(stack), m).values
        b = average_frames(list(stack[list(perm)]), m).values
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


@given(arrays(np.float64, (5, 2, 2), elements=st.floats(0, 10)), st.floats(-1e6, 1e6), st.integers(0, 4))
def test_median_resists_two_outliers(stack, big, k):
    bad = stack.copy()
    out_idx = [k, (k + 1) % 5]
    bad[out_idx] = big
    clean = np.delete(stack, out_idx, axis=0)
    out = average_frames(list(bad), "median").values
    assert np.all(out >= clean.min(axis=0)) and np.all(out <= clean.max(axis=0))


def test_series_round_trip(tmp_path, rng):
    s = ImageSeries(tuple(rng.uniform(0, 100, (3, 4, 5))), 2.5e-6, 7.5e-3)
    save_series(s, tmp_path / "s.rsis")
    r = load_series(tmp_path / "s.rsis")
    assert np.array_equal(r.stack(), s.stack())
    assert (r.dwell_time, r.line_time) == (s.dwell_time, s.line_time)
    raw = (tmp_path / "s.rsis").read_bytes()
    assert raw[:4] == b"RSIS" and len(raw) == 36 + 8 * 60


def test_image_round_trip(tmp_path, rng):
    v = rng.normal(size=(3, 4))
    save_image(v, tmp_path / "i.rsim")
    assert np.array_equal(load_image(tmp_path / "i.rsim").values, v)


def test_format_errors(tmp_path, rng):
    s = ImageSeries(tuple(rng.uniform(0, 1, (2, 3, 3))))
    save_series(s, tmp_path / "s.rsis")
    raw = (tmp_path / "s.rsis").read_bytes()
    (tmp_path / "t.rsis").write_bytes(raw[:-5])
    with pytest.raises(TruncatedPayloadError, match="payload"):
        load_series(tmp_path / "t.rsis")
    (tmp_path / "m.rsis").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        load_series(tmp_path / "m.rsis")
    (tmp_path / "l.rsis").write_bytes(raw + b"\0" * 8)
    with pytest.raises(DimensionMismatchError):
        load_series(tmp_path / "l.rsis")
    with pytest.raises(BadMagicError):
        load_image(tmp_path / "s.rsis")


def test_pgm_sixteen_bit(tmp_path):
    data = np.array([[1234, 0], [65535, 7]], dtype=">u2")
    (tmp_path / "a.pgm").write_bytes(b"P5\n# comment\n2 2\n65535\n" + data.tobytes())
    img = load_pgm(tmp_path / "a.pgm")
    assert img.values[0, 0] == 1234.0 and img.values[1, 0] == 65535.0
    save_pgm(img, tmp_path / "b.pgm")
    assert np.array_equal(load_pgm(tmp_path / "b.pgm").values, img.values)
    (tmp_path / "c.pgm").write_bytes(b"P5\n2 2\n65535\n" + data.tobytes()[:5])
    with pytest.raises(TruncatedPayloadError):
        load_pgm(tmp_path / "c.pgm")
