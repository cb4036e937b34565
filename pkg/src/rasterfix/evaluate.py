"""Quality metrics for reconstructions of crystal lattices.

Precision is the sample standard deviation of fitted neighbour distances
along each lattice direction; the overall value combines both directions
in quadrature after conversion to picometres.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ImageSeries, PixelImage
from .imagemodel import detect_atoms_for_init
from .optim import SmoothObjective, trust_region_minimize

log = logging.getLogger(__name__)

GAN_REFERENCE_PM = (276.174, 518.5)


class PrecisionError(ValueError):
    """Too few atoms or neighbour pairs to define a precision."""


@dataclass
class AtomFit:
    """Fitted Gaussian atoms; centres and sizes in pixels (pixel ``i`` spans ``[i, i+1)``)."""

    centers: np.ndarray
    amplitudes: np.ndarray
    sigmas: np.ndarray
    offsets: np.ndarray

    def __len__(self) -> int:
        return len(self.amplitudes)

    def __iter__(self):
        return iter(zip(map(tuple, self.centers), self.amplitudes, self.sigmas))


def _joint_fit(px, py, v, centers, amps, sigmas, offset, max_iter):
    """Least-squares fit of a sum of Gaussians plus one offset to the samples ``v``.

    Unknowns per atom are ``(cx, cy, a / scale, log s)``; the last unknown
    is ``offset / scale``.
    """
    L = len(amps)
    scale = max(1.0, float(np.abs(v).max()))

    def split(theta):
        t = theta[:-1].reshape(L, 4)
        return t[:, 0], t[:, 1], t[:, 2] * scale, np.exp(t[:, 3]), theta[-1] * scale

    def residual_jac(theta):
        cx, cy, a, s, b = split(theta)
        dx = px[None, :] - cx[:, None]
        dy = py[None, :] - cy[:, None]
        r2 = (dx * dx + dy * dy) / (s * s)[:, None]
        e = np.exp(-0.5 * np.minimum(r2, 700.0))
        ae = a[:, None] * e
        r = b + ae.sum(axis=0) - v
        J = np.empty((px.size, 4 * L + 1))
        J[:, 0:-1:4] = (ae * dx / (s * s)[:, None]).T
        J[:, 1:-1:4] = (ae * dy / (s * s)[:, None]).T
        J[:, 2:-1:4] = scale * e.T
        J[:, 3:-1:4] = (ae * r2).T
        J[:, -1] = scale
        return r, J

    def value_grad(theta):
        r, J = residual_jac(theta)
        return 0.5 * float(r @ r), J.T @ r

    cache = {}

    def hessp(theta, w):
        key = theta.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = residual_jac(theta)[1]
        J = cache[key]
        return J.T @ (J @ w)

    theta0 = np.concatenate([np.column_stack([centers[:, 0], centers[:, 1], amps / scale,
                                              np.log(sigmas)]).ravel(), [offset / scale]])
    obj = SmoothObjective(value_grad, hessp)
    theta, rep = trust_region_minimize(obj, theta0, tol=1e-10 * scale * np.sqrt(px.size),
                                       max_iter=max_iter, radius0=1.0, ftol=1e-14)
    cx, cy, a, s, b = split(theta)
    return np.column_stack([cx, cy]), a, s, b, rep


def fit_atoms(img, sigma_px: Optional[float] = None, threshold: Optional[float] = None,
              min_distance: Optional[int] = None, window: float = 2.5, border: Optional[float] = None,
              min_atoms: int = 4, max_iter: int = 200) -> AtomFit:
    """Sub-pixel Gaussian fits of every detected atom.

    Every atom contributes the pixels within ``window * sigma_est`` of its
    detected position.  Neighbouring atoms overlap strongly at typical
    widths, so all atoms and a common offset are fitted jointly on the
    union of these windows.  Atoms closer than ``border`` pixels (default
    ``window * sigma_est``) to the image edge are dropped after fitting.
    """
    v = img.values if isinstance(img, PixelImage) else np.asarray(img, float)
    N, M = v.shape
    if sigma_px is None:
        # moment widths from a small window are biased low; one pass fixes the smoothing scale
        rough = detect_atoms_for_init(v, None, threshold, min_distance)
        s_est = float(np.median(rough.widths)) * np.sqrt(M * N)
    else:
        s_est = float(sigma_px)
    init = detect_atoms_for_init(v, s_est, threshold, min_distance)
    centers = init.centers * np.array([M, N])
    amps = init.amplitudes.astype(float).copy()
    sig = np.full(len(amps), s_est)
    offset = float(init.offset)
    yy, xx = np.mgrid[0:N, 0:M]
    PX, PY = (xx + 0.5).ravel(), (yy + 0.5).ravel()
    vals = v.ravel()

    for _ in range(3):
        radius = window * s_est
        d2 = (PX[None, :] - centers[:, 0, None]) ** 2 + (PY[None, :] - centers[:, 1, None]) ** 2
        mask = (d2 <= radius * radius).any(axis=0)
        centers, amps, sig, offset, _ = _joint_fit(PX[mask], PY[mask], vals[mask],
                                                   centers, amps, sig, offset, max_iter)
        ok = (amps > 0) & (sig > 0.25 * s_est) & (sig < 4.0 * s_est) & np.all(np.isfinite(centers), axis=1)
        # fits that converged onto the same atom are merged
        for l in range(len(amps)):
            for o in range(l):
                if ok[o] and ok[l] and np.hypot(*(centers[l] - centers[o])) < 0.5 * s_est:
                    ok[l] = False
        if sigma_px is None and ok.any():
            s_est = float(np.median(sig[ok]))
        if ok.all():
            break
        centers, amps, sig = centers[ok], amps[ok], sig[ok]
        if len(amps) == 0:
            break

    edge = window * s_est if border is None else float(border)
    keep = ((centers[:, 0] >= edge) & (centers[:, 0] <= M - edge)
            & (centers[:, 1] >= edge) & (centers[:, 1] <= N - edge))
    if keep.sum() < min_atoms:
        raise PrecisionError(f"only {int(keep.sum())} atoms away from the border; need {min_atoms}")
    return AtomFit(centers[keep], amps[keep], sig[keep], np.full(int(keep.sum()), offset))


def neighbor_pairs(centers: np.ndarray, vector, tol: float = 0.2) -> list:
    """Pairs ``(a, b)`` with ``centers[b] - centers[a]`` within ``tol |vector|`` of ``vector``.

    Each atom gets at most one partner per direction: the candidate with
    the smallest angular deviation, then the smallest distance error.
    """
    c = np.asarray(centers, float)
    L = np.asarray(vector, float)
    Ln = float(np.linalg.norm(L))
    pairs = []
    for a in range(len(c)):
        d = c - c[a]
        err = np.linalg.norm(d - L, axis=1)
        cand = np.nonzero(err <= tol * Ln)[0]
        cand = cand[cand != a]
        if cand.size == 0:
            continue
        ang = np.abs(np.arctan2(d[cand, 1], d[cand, 0]) - np.arctan2(L[1], L[0]))
        ang = np.minimum(ang, 2 * np.pi - ang)
        best = cand[np.lexsort((err[cand], ang))[0]]
        pairs.append((a, int(best)))
    return sorted(pairs)


def pixel_to_pm(mean_px, reference_pm=GAN_REFERENCE_PM) -> float:
    """Average of the per-direction factors ``reference_pm / mean_px``."""
    mean_px = np.atleast_1d(np.asarray(mean_px, float))
    ref = np.atleast_1d(np.asarray(reference_pm, float))
    if mean_px.shape != ref.shape:
        raise ValueError("need one reference distance per mean distance")
    if np.any(mean_px <= 0) or np.any(ref <= 0):
        raise ValueError("distances must be positive")
    return float(np.mean(ref / mean_px))


@dataclass
class PrecisionReport:
    precision_x_px: float
    precision_y_px: float
    precision_x_pm: float
    precision_y_pm: float
    overall_pm: float
    mean_size_px: float
    mean_dx_px: float
    mean_dy_px: float
    pixel_size_pm: float
    atom_count: int
    pairs_x: int
    pairs_y: int

    def with_pixel_size(self, pixel_size_pm: float) -> "PrecisionReport":
        px, py = self.precision_x_px * pixel_size_pm, self.precision_y_px * pixel_size_pm
        return PrecisionReport(self.precision_x_px, self.precision_y_px, px, py, float(np.hypot(px, py)),
                               self.mean_size_px, self.mean_dx_px, self.mean_dy_px, pixel_size_pm,
                               self.atom_count, self.pairs_x, self.pairs_y)

    def to_csv(self, path) -> None:
        names = [f.name for f in fields(self)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            w.writerow([str(v) if isinstance(v, int) else repr(float(v)) for v in (getattr(self, n) for n in names)])

    @classmethod
    def from_csv(cls, path) -> "PrecisionReport":
        with open(path, newline="") as fh:
            row = next(csv.DictReader(fh))
        kw = {}
        for f in fields(cls):
            kw[f.name] = int(row[f.name]) if f.type in ("int", int) else float(row[f.name])
        return cls(**kw)


def precision_from_centers(centers, lattice, sizes=None, reference_pm=GAN_REFERENCE_PM,
                           pixel_size_pm: Optional[float] = None, tol: float = 0.2) -> PrecisionReport:
    """Precision report from atom centres (pixels) and the two lattice vectors (pixels)."""
    c = np.asarray(centers, float)
    a_vec, b_vec = np.asarray(lattice, float)
    px_pairs = neighbor_pairs(c, a_vec, tol)
    py_pairs = neighbor_pairs(c, b_vec, tol)
    if len(px_pairs) < 2 or len(py_pairs) < 2:
        raise PrecisionError(f"need at least 2 neighbour pairs per direction, got "
                             f"{len(px_pairs)} and {len(py_pairs)}")
    dx = np.array([np.linalg.norm(c[b] - c[a]) for a, b in px_pairs])
    dy = np.array([np.linalg.norm(c[b] - c[a]) for a, b in py_pairs])
    sx, sy = float(np.std(dx, ddof=1)), float(np.std(dy, ddof=1))
    if pixel_size_pm is None:
        pixel_size_pm = pixel_to_pm([dx.mean(), dy.mean()], reference_pm)
    size = float(np.mean(sizes)) if sizes is not None and len(sizes) else float("nan")
    rep = PrecisionReport(sx, sy, 0.0, 0.0, 0.0, size, float(dx.mean()), float(dy.mean()),
                          0.0, len(c), len(px_pairs), len(py_pairs))
    return rep.with_pixel_size(pixel_size_pm)


def precision(img, lattice, reference_pm=GAN_REFERENCE_PM, pixel_size_pm: Optional[float] = None,
              tol: float = 0.2, **fit_kw) -> PrecisionReport:
    """Fit all atoms of ``img`` and report the neighbour-distance precision."""
    atoms = img if isinstance(img, AtomFit) else fit_atoms(img, **fit_kw)
    return precision_from_centers(atoms.centers, lattice, atoms.sigmas, reference_pm, pixel_size_pm, tol)


def relative_error_map(recon, truth, crop: int = 8):
    """``|recon - truth| / |truth|`` with ``crop`` pixels removed on each side.

    Returns the map and a dict with its ``max`` and ``mean``.
    """
    r = recon.values if isinstance(recon, PixelImage) else np.asarray(recon, float)
    t = truth.values if isinstance(truth, PixelImage) else np.asarray(truth, float)
    if r.shape != t.shape:
        raise ValueError(f"size mismatch {r.shape} vs {t.shape}")
    N, M = t.shape
    if crop < 0 or 2 * crop >= min(N, M) - 1:
        raise ValueError("crop leaves no image")
    sl = (slice(crop, N - crop), slice(crop, M - crop))
    tc, rc = t[sl], r[sl]
    if np.any(tc == 0):
        raise ValueError("truth vanishes inside the evaluated region")
    err = np.abs(rc - tc) / np.abs(tc)
    return PixelImage(err), {"max": float(err.max()), "mean": float(err.mean())}


# --- split protocol --------------------------------------------------------

def split_indices(length: int, K: int) -> list:
    """Frame index sets of the disjoint sub-series used for ``K`` images each.

    ``K = 1`` uses every other frame as its own series; otherwise ``K`` must
    divide the series length.
    """
    if K < 1:
        raise ValueError("K must be positive")
    if K == 1:
        return [[i] for i in range(0, length, 2)]
    if length % K:
        raise ValueError(f"K={K} does not divide the series length {length}")
    return [list(range(m * K, (m + 1) * K)) for m in range(length // K)]


@dataclass
class SplitRow:
    method: str
    K: int
    precision_x_pm: float
    precision_y_pm: float
    overall_pm: float
    mean_size_px: float
    n_series: int
    n_failed: int
    reports: list = field(default_factory=list, repr=False)


def _reconstruct_default(sub: ImageSeries, method: str, config=None):
    from .pipeline import reconstruct as run_method

    if len(sub) == 1 and method in ("nrr", "nrrplus"):
        return sub.frames[0]
    return run_method(sub, method, config).image


def _worker_init():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(limits=1)


def _evaluate_one(job):
    sub, method, lattice, reference_pm, fit_kw, config, recon = job
    try:
        img = _reconstruct_default(sub, method, config) if recon is None else recon(sub, method)
        return precision(img, lattice, reference_pm, 1.0, **fit_kw), None
    except Exception as exc:  # recorded and excluded by the caller
        return None, f"{type(exc).__name__}: {exc}"


def split_protocol_eval(series: ImageSeries, method: str, K_values: Sequence[int], lattice,
                        reconstruct: Optional[Callable] = None, reference_pm=GAN_REFERENCE_PM,
                        pixel_size_pm: Optional[float] = None, fit_kw: Optional[dict] = None,
                        config=None, threads: int = 1) -> list:
    """Mean precision per ``K`` over disjoint sub-series of ``series``.

    ``reconstruct(sub_series, method)`` returns the image to evaluate; the
    default runs the pipeline with ``config`` (a single frame is its own
    reconstruction for the registration methods, which need pairs).
    Failed sub-series are logged, counted and excluded.  Precisions are
    converted with one pixel size: the given one, or the average of the
    per-direction factors over the mean distances of all reconstructions.
    ``threads > 1`` evaluates sub-series in worker processes; results are
    collected in sub-series order, so they do not depend on ``threads``.
    """
    fit_kw = fit_kw or {}
    jobs, owner = [], []
    for K in K_values:
        for idx in split_indices(len(series), K):
            jobs.append((series.subset(idx), method, lattice, reference_pm, fit_kw, config, reconstruct))
            owner.append((K, idx))
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads, initializer=_worker_init) as pool:
            results = list(pool.map(_evaluate_one, jobs))
    else:
        results = [_evaluate_one(j) for j in jobs]

    raw = {K: ([], 0) for K in K_values}
    for (K, idx), (rep, err) in zip(owner, results):
        reps, failed = raw[K]
        if rep is None:
            log.warning("%s K=%d frames %d..%d failed: %s", method, K, idx[0], idx[-1], err)
            raw[K] = (reps, failed + 1)
        else:
            reps.append(rep)
    every = [r for reps, _ in raw.values() for r in reps]
    if pixel_size_pm is None:
        if not every:
            raise PrecisionError("no sub-series could be evaluated")
        pixel_size_pm = pixel_to_pm([np.mean([r.mean_dx_px for r in every]),
                                     np.mean([r.mean_dy_px for r in every])], reference_pm)
    rows = []
    for K in K_values:
        reports, failed = raw[K]
        reports = [r.with_pixel_size(pixel_size_pm) for r in reports]
        if reports:
            px = float(np.mean([r.precision_x_pm for r in reports]))
            py = float(np.mean([r.precision_y_pm for r in reports]))
            ov = float(np.mean([r.overall_pm for r in reports]))
            sz = float(np.mean([r.mean_size_px for r in reports]))
        else:
            px = py = ov = sz = float("nan")
        rows.append(SplitRow(method, K, px, py, ov, sz, len(reports) + failed, failed, reports))
    return rows


def loglog_slope(K_values, values) -> float:
    """Least-squares slope of ``log(values)`` against ``log(K)``."""
    x = np.log(np.asarray(K_values, float))
    y = np.log(np.asarray(values, float))
    return float(np.polyfit(x, y, 1)[0])


# --- output ----------------------------------------------------------------

TABLE_FIELDS = ("method", "K", "precision_x_pm", "precision_y_pm", "overall_pm", "mean_size_px",
                "n_series", "n_failed")


def write_table(rows: Sequence[SplitRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_FIELDS)
        for r in rows:
            w.writerow([r.method, r.K] + [repr(float(getattr(r, f))) for f in TABLE_FIELDS[2:6]]
                       + [r.n_series, r.n_failed])


def read_table(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            out.append(SplitRow(d["method"], int(d["K"]), float(d["precision_x_pm"]),
                                float(d["precision_y_pm"]), float(d["overall_pm"]),
                                float(d["mean_size_px"]), int(d["n_series"]), int(d["n_failed"])))
    return out


def _svg_plot(rows, column, path, ylabel, loglog, reference=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "rasterfix", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for method in dict.fromkeys(r.method for r in rows):
            sel = sorted((r for r in rows if r.method == method), key=lambda r: r.K)
            ax.plot([r.K for r in sel], [getattr(r, column) for r in sel], marker="o", label=method)
        if reference is not None:
            ax.axhline(reference, color="gray", linestyle="--", linewidth=1, label="generation size")
        if loglog:
            ax.set_xscale("log", base=2)
            ax.set_yscale("log")
        ax.set_xlabel("number of images K")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_precision_plot(rows: Sequence[SplitRow], path) -> None:
    """``<path>.csv`` with the table and ``<path>.svg`` with overall precision against K (log-log)."""
    p = Path(path)
    write_table(rows, p.with_suffix(".csv"))
    _svg_plot(rows, "overall_pm", p.with_suffix(".svg"), "precision [pm]", loglog=True)


def emit_size_plot(rows: Sequence[SplitRow], path, sigma_gen: Optional[float] = None) -> None:
    """``<path>.csv`` and ``<path>.svg`` with the mean fitted atom size against K."""
    p = Path(path)
    write_table(rows, p.with_suffix(".csv"))
    _svg_plot(rows, "mean_size_px", p.with_suffix(".svg"), "atom size [px]", loglog=False,
              reference=sigma_gen)
