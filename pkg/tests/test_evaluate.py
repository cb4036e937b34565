import math

import numpy as np
import pytest

from rasterfix.core import PixelImage, pixel_coordinates
from rasterfix.evaluate import (PrecisionError, PrecisionReport, SplitRow, emit_precision_plot,
                                emit_size_plot, fit_atoms, loglog_slope, neighbor_pairs, pixel_to_pm,
                                precision, precision_from_centers, read_table, relative_error_map,
                                split_indices, split_protocol_eval, write_table)
from rasterfix.core import ImageSeries
from rasterfix.synth import SynthConfig, generate_series

from oracles import brute_pairs


def gaussian_image(M, N, centers_px, sigma, amp=200.0, offset=20.0):
    X, Y = pixel_coordinates(M, N)
    X, Y = X * M, Y * N
    out = np.full((N, M), offset)
    for cx, cy in centers_px:
        out += amp * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * sigma ** 2))
    return out


def lattice_centers(nx=8, ny=6, a=13.0, b=24.0):
    return np.array([(10.0 + i * a, 12.0 + j * b) for j in range(ny) for i in range(nx)])


# --- atom fitting ------------------------------------------------------------

def test_single_gaussian_center_and_sigma():
    img = gaussian_image(40, 40, [(19.3, 21.7)], 3.1)
    fit = fit_atoms(img, min_atoms=1)
    assert len(fit) == 1
    assert np.abs(fit.centers[0] - (19.3, 21.7)).max() <= 1e-3
    assert abs(fit.sigmas[0] - 3.1) <= 1e-3


def test_rendered_lattice_sigma():
    cfg = SynthConfig(frames=1, noise=False)
    img = generate_series(cfg).series.frames[0]
    fit = fit_atoms(img)
    assert len(fit) >= 8
    np.testing.assert_allclose(fit.sigmas, cfg.sigma, atol=1e-2)


def test_noisy_single_atom_monte_carlo():
    clean = gaussian_image(32, 32, [(15.4, 16.2)], 4.25)
    rng = np.random.default_rng(2024)
    errs = []
    for _ in range(100):
        fit = fit_atoms(rng.poisson(clean).astype(float), sigma_px=4.25, min_atoms=1)
        errs.append(np.linalg.norm(fit.centers[0] - (15.4, 16.2)))
    assert max(errs) <= 0.2


def test_too_few_atoms():
    with pytest.raises(PrecisionError):
        fit_atoms(gaussian_image(40, 40, [(20.0, 20.0)], 3.0))


# --- pairing ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_pairs_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    c = lattice_centers() + rng.normal(0, 1.2, (48, 2))
    c = c[rng.permutation(len(c))[:40]]
    for L in ((13.0, 0.0), (0.0, 24.0)):
        got = neighbor_pairs(c, L)
        assert got == brute_pairs(c.tolist(), L, 0.2)
        d = [np.linalg.norm(c[b] - c[a]) for a, b in got]
        ref = [math.dist(c[b], c[a]) for a, b in brute_pairs(c.tolist(), L, 0.2)]
        # identical pairs; the two distance routines may round differently in the last bit
        assert np.std(d, ddof=1) == pytest.approx(np.std(ref, ddof=1), rel=1e-14)


def test_perfect_lattice_zero_precision():
    rep = precision_from_centers(lattice_centers(), [(13, 0), (0, 24)])
    assert rep.precision_x_px == pytest.approx(0.0, abs=1e-12)
    assert rep.precision_y_px == pytest.approx(0.0, abs=1e-12)
    assert rep.pairs_x == 7 * 6 and rep.pairs_y == 8 * 5


def test_sqrt2_law():
    rng = np.random.default_rng(5)
    c = lattice_centers(30, 12).astype(float)
    c[:, 0] += rng.normal(0, 0.1, len(c))
    rep = precision_from_centers(c, [(13, 0), (0, 24)])
    n = rep.pairs_x
    assert n >= 200
    # standard error of a std estimate is sigma / sqrt(2(n-1)); chained pairs share atoms,
    # which roughly doubles the variance, so allow 4 inflated standard errors
    sigma = 0.1 * math.sqrt(2)
    assert abs(rep.precision_x_px - sigma) <= 4 * math.sqrt(2) * sigma / math.sqrt(2 * (n - 1))
    # x jitter only enters Euclidean y distances at second order
    assert rep.precision_y_px < 0.01


def test_overall_identity_translation_and_relabel_invariance():
    rng = np.random.default_rng(9)
    c = lattice_centers() + rng.normal(0, 0.3, (48, 2))
    rep = precision_from_centers(c, [(13, 0), (0, 24)])
    assert rep.overall_pm ** 2 == pytest.approx(rep.precision_x_pm ** 2 + rep.precision_y_pm ** 2, rel=1e-9)
    moved = precision_from_centers(c[rng.permutation(48)] + (3.7, -1.2), [(13, 0), (0, 24)])
    assert moved.precision_x_px == pytest.approx(rep.precision_x_px, rel=1e-12)
    assert moved.precision_y_px == pytest.approx(rep.precision_y_px, rel=1e-12)


def test_no_pairs_error():
    with pytest.raises(PrecisionError):
        precision_from_centers(lattice_centers(nx=1), [(13, 0), (0, 24)])


# --- pixel size ------------------------------------------------------------

def test_pixel_to_pm_reference_values():
    assert pixel_to_pm([27.6174, 51.85]) == pytest.approx(10.0, rel=1e-12)
    assert pixel_to_pm([13.8087], [276.174]) == pytest.approx(20.0, rel=1e-12)
    assert pixel_to_pm([10.0, 20.0], [50.0, 100.0]) == pytest.approx(5.0, rel=1e-15)


@pytest.mark.parametrize("bad", [[0.0, 5.0], [-1.0, 5.0]])
def test_pixel_to_pm_rejects_nonpositive(bad):
    with pytest.raises(ValueError):
        pixel_to_pm(bad)


# --- relative error ----------------------------------------------------------

def test_relative_error_examples():
    rng = np.random.default_rng(0)
    t = rng.uniform(1, 10, (30, 30))
    _, s = relative_error_map(t, t)
    assert s["max"] == 0.0
    m, s = relative_error_map(1.01 * t, t)
    np.testing.assert_allclose(m.values, 0.01, rtol=1e-12)
    r = rng.uniform(1, 10, (30, 30))
    m, s = relative_error_map(r, t, crop=3)
    oracle = np.array([[abs(r[i, j] - t[i, j]) / abs(t[i, j]) for j in range(3, 27)] for i in range(3, 27)])
    np.testing.assert_array_equal(m.values, oracle)
    assert s["max"] == oracle.max()


def test_relative_error_errors():
    with pytest.raises(ValueError):
        relative_error_map(np.ones((10, 10)), np.ones((10, 12)))
    with pytest.raises(ValueError):
        relative_error_map(np.ones((10, 10)), np.ones((10, 10)), crop=5)


# --- split protocol ----------------------------------------------------------

def test_split_indices():
    assert len(split_indices(64, 2)) == 32
    assert split_indices(64, 64) == [list(range(64))]
    ones = split_indices(64, 1)
    assert len(ones) == 32 and [s[0] for s in ones] == list(range(0, 64, 2))
    for K in (2, 4, 8, 16, 32):
        sets = split_indices(64, K)
        flat = [i for s in sets for i in s]
        assert sorted(flat) == list(range(64))
    with pytest.raises(ValueError):
        split_indices(64, 3)


def test_split_protocol_with_stub_reconstruction():
    frames = tuple(PixelImage(np.full((4, 4), float(k + 1))) for k in range(8))
    series = ImageSeries(frames, 1e-5, 1e-2)
    seen = []

    def recon(sub, method):
        seen.append(tuple(f.values[0, 0] for f in sub.frames))
        return PixelImage(np.zeros((4, 4)))

    rng = np.random.default_rng(1)
    c = lattice_centers() + rng.normal(0, 0.2, (48, 2))
    from rasterfix import evaluate

    orig = evaluate.precision
    evaluate.precision = lambda img, lattice, ref, ps, **kw: precision_from_centers(c, lattice, None, ref, ps)
    try:
        rows = split_protocol_eval(series, "stub", [1, 2, 8], [(13, 0), (0, 24)], reconstruct=recon)
    finally:
        evaluate.precision = orig
    assert [r.n_series for r in rows] == [4, 4, 1]
    assert seen[:4] == [(1.0,), (3.0,), (5.0,), (7.0,)]
    assert seen[-1] == tuple(float(k + 1) for k in range(8))
    ref = precision_from_centers(c, [(13, 0), (0, 24)])
    for r in rows:
        assert r.overall_pm == pytest.approx(ref.overall_pm, rel=1e-12)


def test_split_protocol_records_failures():
    frames = tuple(PixelImage(np.full((4, 4), 1.0)) for _ in range(4))

    def recon(sub, method):
        return PixelImage(np.ones((4, 4)))

    with pytest.raises(PrecisionError):
        split_protocol_eval(ImageSeries(frames, 1e-5, 1e-2), "stub", [2], [(13, 0), (0, 24)],
                            reconstruct=recon)


def test_loglog_slope():
    K = [1, 2, 4, 8]
    assert loglog_slope(K, [3.0 / np.sqrt(k) for k in K]) == pytest.approx(-0.5, abs=1e-12)


# --- tables and plots --------------------------------------------------------

def rows_fixture():
    return [SplitRow("jud", K, 1.0 / K, 2.0 / K, math.hypot(1.0, 2.0) / K, 4.2 + 0.01 * K, 64 // K, 0)
            for K in (1, 2, 4)]


def test_table_round_trip(tmp_path):
    rows = rows_fixture()
    write_table(rows, tmp_path / "t.csv")
    back = read_table(tmp_path / "t.csv")
    for a, b in zip(rows, back):
        assert (a.method, a.K, a.precision_x_pm, a.precision_y_pm, a.overall_pm, a.mean_size_px,
                a.n_series, a.n_failed) == (b.method, b.K, b.precision_x_pm, b.precision_y_pm,
                                            b.overall_pm, b.mean_size_px, b.n_series, b.n_failed)


def test_report_csv_round_trip(tmp_path):
    rep = precision_from_centers(lattice_centers() + 0.01 * np.arange(96).reshape(48, 2) ** 0.5,
                                 [(13, 0), (0, 24)], sizes=[4.2, 4.3])
    rep.to_csv(tmp_path / "r.csv")
    assert PrecisionReport.from_csv(tmp_path / "r.csv") == rep


def test_plots_are_emitted_and_deterministic(tmp_path):
    rows = rows_fixture()
    emit_precision_plot(rows[:1], tmp_path / "one")
    assert (tmp_path / "one.csv").exists()
    assert (tmp_path / "one.svg").read_text().lstrip().startswith("<?xml")
    emit_precision_plot(rows, tmp_path / "a")
    emit_precision_plot(rows, tmp_path / "b")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    emit_size_plot(rows, tmp_path / "size", sigma_gen=4.25)
    assert "<svg" in (tmp_path / "size.svg").read_text()


def test_precision_on_image():
    centers = lattice_centers(5, 3)
    img = gaussian_image(80, 80, centers, 4.25)
    rep = precision(img, [(13, 0), (0, 24)])
    assert rep.precision_x_px < 1e-3 and rep.precision_y_px < 1e-3
    assert rep.mean_dx_px == pytest.approx(13.0, abs=1e-3)
