"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict (printed, and repeated in
the terminal summary) before asserting.
"""

import math
import os
import time

import numpy as np
import pytest

from rasterfix import cli
from rasterfix.core import ImageSeries, PixelImage, pixel_coordinates
from rasterfix.deform import brownian_regularizer, tikhonov_regularizer
from rasterfix.evaluate import (loglog_slope, neighbor_pairs, precision, precision_from_centers,
                                relative_error_map, split_protocol_eval)
from rasterfix.fidelity import ncc_distance
from rasterfix.gradcheck import TOLERANCE, run_checks
from rasterfix.optim import bfgs_minimize, trust_region_minimize
from rasterfix.pipeline import jud_reconstruct, nrr_plus_reconstruct
from rasterfix.synth import SynthConfig, generate_series, ground_truth, inject_known_shifts

from conftest import record_verdict
from oracles import brute_pairs, ncc_oracle, r1_oracle, r2_oracle, relative_error_oracle

K_VALUES = [1, 2, 4, 8, 16, 32]
LATTICE = np.array([[13.0, 0.0], [0.0, 24.0]])
THREADS = os.cpu_count() or 1


def rms(a):
    return float(np.sqrt(np.mean(np.square(a))))


# --- 1. gradient suite ---------------------------------------------------------

def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    results = run_checks("all", instances=10, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(err for _, _, err in results)
    targets = {t for t, _, _ in results}
    ok = worst <= TOLERANCE and elapsed < 60 and targets == {"fidelity", "deform", "imagemodel", "jud"}
    record_verdict(1, ok, f"{len(results)} checks x 10 instances, worst relative error {worst:.2e}, "
                          f"{elapsed:.1f} s")
    assert ok


# --- 2. oracle equivalence --------------------------------------------------------

def test_criterion_02_oracles():
    rng = np.random.default_rng(2)
    worst = {"ncc": 0.0, "R1": 0.0, "R2": 0.0, "pairs": 0.0, "relerr": 0.0}
    pairs_equal = True
    for _ in range(20):
        u, v = rng.uniform(1, 10, (2, 6, 6))
        um, vm = rng.uniform(size=(2, 6, 6)) > 0.25
        um[0, 0] = vm[0, 0] = True
        for policy in ("union", "intersection"):
            got = ncc_distance(u, v, policy, um, vm)
            worst["ncc"] = max(worst["ncc"], abs(got - ncc_oracle(u, v, um, vm, policy)))

        s = rng.normal(size=(6, 6, 2))
        Lam, dt, dT = rng.uniform(0.5, 2, 3)
        r1 = brownian_regularizer(s, Lam, dt, dT)[0]
        worst["R1"] = max(worst["R1"], abs(r1 - r1_oracle(s, Lam, dt, dT)) / max(1.0, r1))
        r2 = tikhonov_regularizer(s, 25.9, 71.4)[0]
        worst["R2"] = max(worst["R2"], abs(r2 - r2_oracle(s, 25.9, 71.4)) / max(1.0, r2))

        c = np.array([(3.0 + 13 * i, 4.0 + 24 * j) for j in range(6) for i in range(6)])
        c += rng.normal(0, 1.0, c.shape)
        for L in LATTICE:
            got = neighbor_pairs(c, L)
            ref = brute_pairs(c.tolist(), L.tolist(), 0.2)
            pairs_equal &= got == ref
            if len(got) > 1:
                d_got = np.std([np.linalg.norm(c[b] - c[a]) for a, b in got], ddof=1)
                ref_d = [math.dist(c[b], c[a]) for a, b in ref]
                mean = sum(ref_d) / len(ref_d)
                d_ref = math.sqrt(sum((x - mean) ** 2 for x in ref_d) / (len(ref_d) - 1))
                worst["pairs"] = max(worst["pairs"], abs(d_got - d_ref))

        t = rng.uniform(1, 10, (6, 6))
        r = rng.uniform(1, 10, (6, 6))
        m, _ = relative_error_map(r, t, crop=1)
        worst["relerr"] = max(worst["relerr"], float(np.abs(m.values - np.array(
            relative_error_oracle(r.tolist(), t.tolist(), 1))).max()))
    ok = pairs_equal and max(worst.values()) <= 1e-12
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_verdict(2, ok, f"max deviation: {detail}; pair sets identical: {pairs_equal}")
    assert ok


# --- 3. noiseless recovery --------------------------------------------------------

def test_criterion_03_noiseless_recovery():
    cfg = SynthConfig(size=(64, 64), frames=8, noise=False, seed=3)
    r = generate_series(cfg)
    t0 = time.perf_counter()
    res = jud_reconstruct(r.series)
    elapsed = time.perf_counter() - t0
    s_inf = max(float(np.abs(np.asarray(s.s)).max()) for s in res.shifts) * 64
    truth = r.truth.render(64, 64).values
    rel = rms(res.image.values - truth) / rms(truth)
    ok = s_inf <= 0.05 and rel <= 0.01 and elapsed < 300
    record_verdict(3, ok, f"shift inf-norm {s_inf:.2e} px, f RMS error {100 * rel:.3f}%, {elapsed:.0f} s")
    assert ok


# --- 4. known-shift recovery, 7. scanline artefacts ----------------------------------

@pytest.fixture(scope="module")
def injected():
    cfg = SynthConfig(size=(64, 64), frames=8, seed=4)
    truth = ground_truth(cfg)
    rng = np.random.default_rng(40)
    # frame 0 is the unshifted reference; the others are zero-mean and within 1 px
    lines = [np.zeros((64, 2))]
    for _ in range(cfg.frames - 1):
        ls = rng.uniform(-1.0, 1.0, (64, 2))
        ls -= ls.mean(axis=0)
        lines.append(ls / max(1.0, np.abs(ls).max()))
    series = inject_known_shifts(truth, lines, 64, 64)
    t0 = time.perf_counter()
    res = jud_reconstruct(series)
    return truth, lines, series, res, time.perf_counter() - t0


def test_criterion_04_known_shift_recovery(injected):
    _, lines, _, res, elapsed = injected
    err = []
    for k, ls in enumerate(lines):
        got = np.asarray(res.shifts[k].s).mean(axis=1) * 64
        err.append(got - ls)  # both sides have zero mean per frame
    err = np.array(err)
    total = rms(err)
    ok = total <= 0.1 and elapsed < 300
    record_verdict(4, ok, f"per-line shift RMS error {total:.3f} px (x {rms(err[..., 0]):.3f}, "
                          f"y {rms(err[..., 1]):.3f}), {elapsed:.0f} s")
    assert ok


def test_criterion_07_scanline_artefacts(injected):
    truth, _, series, res, _ = injected
    plus = nrr_plus_reconstruct(series)
    ref = truth.render(64, 64)
    _, jud_stats = relative_error_map(res.image, ref)
    _, plus_stats = relative_error_map(plus.image, ref)
    ok = jud_stats["max"] < plus_stats["max"]
    record_verdict(7, ok, f"cropped relative error max: JUD {100 * jud_stats['max']:.2f}%, "
                          f"NRR+ {100 * plus_stats['max']:.2f}%")
    assert ok


# --- 5. 1/sqrt(K) scaling, 6. atom size ------------------------------------------------

@pytest.fixture(scope="module")
def study():
    cfg = SynthConfig(size=(64, 64), frames=32, seed=1)
    r = generate_series(cfg)
    t0 = time.perf_counter()
    rows = {m: split_protocol_eval(r.series, m, K_VALUES, LATTICE, threads=THREADS)
            for m in ("jud", "nrr")}
    return cfg, r, rows, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_05_sqrt_k_scaling(study):
    _, _, rows, elapsed = study
    slopes = {m: loglog_slope(K_VALUES, [row.overall_pm for row in rs]) for m, rs in rows.items()}
    failed = sum(row.n_failed for rs in rows.values() for row in rs)
    ok = (-0.65 <= slopes["jud"] <= -0.35) and slopes["nrr"] > slopes["jud"] and elapsed < 1800
    table = "; ".join(f"{m} " + " ".join(f"{row.overall_pm:.2f}" for row in rs) for m, rs in rows.items())
    record_verdict(5, ok, f"slopes JUD {slopes['jud']:.3f}, NRR {slopes['nrr']:.3f}; "
                          f"overall pm per K: {table}; {failed} failed sub-series; {elapsed:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_06_atom_size(study):
    cfg, r, rows, _ = study
    sizes = {m: rs[-1].mean_size_px for m, rs in rows.items()}
    plus = nrr_plus_reconstruct(r.series)
    sizes["nrrplus"] = precision(plus.image, LATTICE).mean_size_px
    dev = {m: abs(s - cfg.sigma) for m, s in sizes.items()}
    ok = dev["jud"] <= 0.05 * cfg.sigma and dev["jud"] <= dev["nrr"] and dev["jud"] <= dev["nrrplus"]
    record_verdict(6, ok, "mean fitted size at K=32: " + ", ".join(f"{m} {s:.3f} px" for m, s in sizes.items())
                   + f" (generated {cfg.sigma} px)")
    assert ok


# --- 8. precision identity and sqrt(2) law --------------------------------------------

def test_criterion_08_precision_identity_and_sqrt2():
    rng = np.random.default_rng(8)
    worst_identity = 0.0
    for _ in range(50):
        c = np.array([(5.0 + 13 * i, 6.0 + 24 * j) for j in range(6) for i in range(8)])
        c += rng.normal(0, rng.uniform(0.01, 1.0), c.shape)
        rep = precision_from_centers(c, LATTICE)
        lhs = rep.overall_pm ** 2
        worst_identity = max(worst_identity, abs(lhs - rep.precision_x_pm ** 2 - rep.precision_y_pm ** 2)
                             / max(lhs, 1e-300))
    sigma = 0.1
    c = np.array([(5.0 + 13 * i, 6.0 + 24 * j) for j in range(30) for i in range(30)], float)
    c += rng.normal(0, sigma, c.shape)
    rep = precision_from_centers(c, LATTICE)
    ratio_x = rep.precision_x_px / (math.sqrt(2) * sigma)
    ratio_y = rep.precision_y_px / (math.sqrt(2) * sigma)
    ok = (worst_identity <= 1e-9 and min(rep.pairs_x, rep.pairs_y) >= 200
          and abs(ratio_x - 1) <= 0.1 and abs(ratio_y - 1) <= 0.1)
    record_verdict(8, ok, f"identity relative error {worst_identity:.1e}; measured/sqrt(2)sigma "
                          f"x {ratio_x:.3f}, y {ratio_y:.3f} over {rep.pairs_x}/{rep.pairs_y} pairs")
    assert ok


# --- 9. solver benchmarks --------------------------------------------------------------

def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def test_criterion_09_solvers():
    out = []
    for name, solver in (("BFGS", bfgs_minimize), ("TR", trust_region_minimize)):
        x, rep = solver(rosenbrock, np.array([-1.2, 1.0]), tol=1e-8, max_iter=200)
        gn = float(np.linalg.norm(rosenbrock(x)[1]))
        out.append((f"{name} Rosenbrock", gn <= 1e-8 and rep.iterations <= 200, gn, rep.iterations))
        rng = np.random.default_rng(9)
        worst, iters = 0.0, 0
        for n in (2, 10, 50):
            Q = rng.normal(size=(n, n))
            A = Q @ Q.T + n * np.eye(n)
            b = rng.normal(size=n)
            x, rep = solver(lambda z: (0.5 * z @ A @ z - b @ z, A @ z - b), np.zeros(n), tol=1e-8, max_iter=500)
            worst = max(worst, float(np.linalg.norm(A @ x - b)))
            iters = max(iters, rep.iterations)
        out.append((f"{name} SPD quadratic", worst <= 1e-8, worst, iters))
    ok = all(o[1] for o in out)
    record_verdict(9, ok, "; ".join(f"{n}: |grad| {g:.1e} in {i} it" for n, _, g, i in out))
    assert ok


# --- 10. bias correction ---------------------------------------------------------------

def blobs(M=48, N=48, seed=0):
    rng = np.random.default_rng(seed)
    X, Y = pixel_coordinates(M, N)
    out = np.full((N, M), 10.0)
    for _ in range(7):
        c = rng.uniform(0.15, 0.85, 2)
        s = rng.uniform(0.05, 0.12)
        out += rng.uniform(40, 120) * np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2) / (2 * s * s))
    return out


def test_criterion_10_bias_correction():
    worst_gain = -np.inf
    for seed in range(2):
        r = generate_series(SynthConfig(size=(64, 64), frames=4, seed=100 + seed))
        res = nrr_plus_reconstruct(r.series, max_outer=3)
        for before, after in res.extras["psi_residuals"]:
            worst_gain = max(worst_gain, after - before)
    u = blobs(seed=6)
    frames = [u] + [np.roll(u, 2, axis=1)] * 3
    series = ImageSeries(tuple(PixelImage(f) for f in frames), 1e-5, 1e-2)
    res = nrr_plus_reconstruct(series, max_outer=2)
    mean_disp = np.mean([g.disp[1:-1, 1:-1] for g in res.grids], axis=0) * 48
    node_mean = float(np.abs(mean_disp).mean())
    ok = worst_gain <= 0.0 and node_mean <= 0.05
    record_verdict(10, ok, f"largest change of sum |phi o psi - id|^2 over identity {worst_gain:.2e}; "
                           f"common-translation mean node displacement {node_mean:.3f} px")
    assert ok


# --- 11. determinism -------------------------------------------------------------------

def test_criterion_11_determinism(tmp_path):
    def run(*argv):
        return cli.main([str(a) for a in argv])

    def tree(path):
        return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}

    same = {}
    for tag in ("a", "b"):
        assert run("synth", "--frames", 4, "--seed", 11, "--out", tmp_path / f"synth_{tag}") == 0
    same["synth"] = tree(tmp_path / "synth_a") == tree(tmp_path / "synth_b")
    series = tmp_path / "synth_a" / "series.rsis"
    small = tmp_path / "small"
    assert run("synth", "--size", 32, "--frames", 2, "--seed", 11, "--out", small) == 0
    codes = []
    for tag, threads in (("a", 1), ("b", 2), ("c", 1)):
        codes.append(run("--threads", threads, "reconstruct", "--method", "jud", "--in", small / "series.rsis",
                         "--n-spline", 24, "--out", tmp_path / f"rec_{tag}"))
    same["reconstruct"] = tree(tmp_path / "rec_a") == tree(tmp_path / "rec_b") == tree(tmp_path / "rec_c")
    for tag, threads in (("a", 1), ("b", 2)):
        assert run("--threads", threads, "study", "--series", series, "--methods", "jud,nrr",
                   "--k-values", "2,4", "--n-spline", 16, "--out", tmp_path / f"study_{tag}") == 0
    same["study"] = tree(tmp_path / "study_a") == tree(tmp_path / "study_b")
    ok = all(same.values()) and len(set(codes)) == 1
    record_verdict(11, ok, "byte-identical: " + ", ".join(f"{k} {v}" for k, v in same.items())
                   + f" (reconstruct exit codes {codes})")
    assert ok
