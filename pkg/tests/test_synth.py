import numpy as np
import pytest
from scipy import stats

from rasterfix.core import load_series
from rasterfix.deform import RigidMotion, ScanlineShiftField
from rasterfix.synth import (SynthConfig, brownian_shifts, generate_series, ground_truth,
                             inject_known_shifts, render_frame, write_synth, _frame_rng)


def small_cfg(**kw):
    base = dict(size=(32, 32), frames=3, origin=(6.5, 8.0), seed=7)
    base.update(kw)
    return SynthConfig(**base)


def test_fixed_seed_regenerates_bit_identical():
    a = generate_series(small_cfg())
    b = generate_series(small_cfg())
    for fa, fb in zip(a.series.frames, b.series.frames):
        assert fa.values.tobytes() == fb.values.tobytes()
    assert generate_series(small_cfg(seed=8)).series.frames[0].values.tobytes() != \
        a.series.frames[0].values.tobytes()


def test_shapes_and_metadata():
    cfg = small_cfg(size=(40, 24), frames=4, dwell_time=2e-5, line_time=3e-2)
    r = generate_series(cfg)
    assert len(r.series.frames) == 4
    assert r.series.frames[0].values.shape == (24, 40)
    assert r.series.dwell_time == cfg.dwell_time
    assert r.series.line_time == cfg.line_time
    assert len(r.shifts) == len(r.rigid) == 4
    assert np.all(r.series.stack() >= 0)


def test_noise_off_gives_truth_in_every_frame():
    cfg = small_cfg(noise=False, drift_step_std=0.7)
    r = generate_series(cfg)
    truth = r.truth.render(32, 32).values
    for f in r.series.frames:
        np.testing.assert_allclose(f.values, truth, rtol=0, atol=1e-12)


def test_ground_truth_value_is_lattice_gaussian_sum():
    cfg = small_cfg()
    truth = ground_truth(cfg)
    x0, y0 = 6.5, 8.0
    expected = cfg.background
    for p in range(-8, 9):
        for q in range(-8, 9):
            dx, dy = 13.0 * p, 24.0 * q
            expected += cfg.dose * np.exp(-(dx * dx + dy * dy) / (2 * cfg.sigma ** 2))
    val = truth(np.array([x0 / 32]), np.array([y0 / 32]))[0]
    assert val == pytest.approx(expected, rel=1e-12)


def test_poisson_mean_monte_carlo():
    rng = _frame_rng(3, 0)
    draws = rng.poisson(np.full(10_000, 100.0))
    # 3 sigma / sqrt(n) with sigma = 10
    assert abs(draws.mean() - 100.0) <= 3 * 10 / np.sqrt(draws.size)
    assert abs(draws.var(ddof=1) - 100.0) <= 5.0


def test_brownian_increments_have_configured_variance():
    rng = _frame_rng(11, 0)
    s = brownian_shifts(200, 50, 0.3, 1.5, rng)
    inline = np.diff(s, axis=1).reshape(-1)
    assert stats.kstest(inline / 0.3, "norm").pvalue > 0.01
    flyback = (s[1:, 0] - s[:-1, -1]).reshape(-1)
    assert stats.kstest(flyback / 1.5, "norm").pvalue > 0.01


def test_inject_zero_shifts_is_truth_render():
    cfg = small_cfg()
    truth = ground_truth(cfg)
    series = inject_known_shifts(truth, [np.zeros((32, 2))] * 2, 32, 32)
    ref = truth.render(32, 32).values
    for f in series.frames:
        np.testing.assert_allclose(f.values, ref, rtol=0, atol=1e-12)


def test_inject_one_line_shift():
    cfg = small_cfg()
    truth = ground_truth(cfg)
    ls = np.zeros((32, 2))
    ls[5] = (1.0, 0.0)
    img = inject_known_shifts(truth, [ls], 32, 32).frames[0].values
    x = (np.arange(32) + 0.5 + 1.0) / 32
    y = np.full(32, 5.5 / 32)
    np.testing.assert_allclose(img[5], truth(x, y), rtol=0, atol=1e-12)
    ref = truth.render(32, 32).values
    np.testing.assert_allclose(np.delete(img, 5, 0), np.delete(ref, 5, 0), rtol=0, atol=1e-12)


def test_render_frame_rigid_translation():
    cfg = small_cfg()
    truth = ground_truth(cfg)
    zero = ScanlineShiftField(np.zeros((32, 32, 2)))
    moved = render_frame(truth, RigidMotion(0.0, (2.0 / 32, 0.0)), zero)
    ref = truth.render(32, 32).values
    np.testing.assert_allclose(moved[:, :-2], ref[:, 2:], atol=1e-10)


def test_write_synth_outputs(tmp_path):
    r = generate_series(small_cfg())
    write_synth(r, tmp_path)
    for name in ("series.rsis", "truth_bumps.csv", "truth_shifts.csv", "truth_rigid.csv", "config.json"):
        assert (tmp_path / name).exists()
    back = load_series(tmp_path / "series.rsis")
    np.testing.assert_array_equal(back.stack(), r.series.stack())
    assert SynthConfig.from_json(tmp_path / "config.json") == r.config


@pytest.mark.parametrize("kw", [dict(sigma=0.0), dict(dose=-1.0), dict(frames=0), dict(size=(1, 5))])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        small_cfg(**kw)
