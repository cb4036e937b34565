"""Continuous image models: tensor-product cubic B-splines and sums of Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .core import PixelImage, pixel_coordinates, save_image, load_image


class NoPeaksError(ValueError):
    pass


class SplineFitError(RuntimeError):
    pass


# --- cubic B-spline basis -----------------------------------------------------

def clamped_knots(n: int) -> np.ndarray:
    """Knot vector of ``n`` clamped cubic B-splines with equidistant interior knots."""
    if n < 4:
        raise ValueError("a cubic spline basis needs n >= 4")
    inner = np.linspace(0.0, 1.0, n - 2)
    return np.concatenate([[0.0] * 3, inner, [1.0] * 3])


def basis_functions(t, n: int, derivative: bool = True):
    """The 4 active cubic basis values (and derivatives) at points ``t``.

    Returns ``(first, B, dB)`` where ``first`` is the index of the first active
    basis function and ``B``/``dB`` have shape ``t.shape + (4,)``.  Points
    outside ``[0, 1]`` are clamped.
    """
    knots = clamped_knots(n)
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    shape = t.shape
    t = t.ravel()
    spans = n - 3
    span = np.minimum(np.floor(t * spans).astype(np.intp), spans - 1) + 3
    P = t.size
    Nb = np.zeros((P, 4))
    Nb[:, 0] = 1.0
    left = np.zeros((P, 4))
    right = np.zeros((P, 4))
    N2 = None
    for j in range(1, 4):
        left[:, j] = t - knots[span + 1 - j]
        right[:, j] = knots[span + j] - t
        saved = np.zeros(P)
        for r in range(j):
            temp = Nb[:, r] / (right[:, r + 1] + left[:, j - r])
            Nb[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        Nb[:, j] = saved
        if j == 2:
            N2 = Nb[:, :3].copy()
    first = span - 3
    if not derivative:
        return first.reshape(shape), Nb.reshape(shape + (4,)), None
    # N'_{i,3} = 3 (N_{i,2} / (u_{i+3} - u_i) - N_{i+1,2} / (u_{i+4} - u_{i+1}))
    quad = np.zeros((P, 5))
    quad[:, 1:4] = N2
    dB = np.zeros((P, 4))
    for a in range(4):
        i = first + a
        d1 = knots[i + 3] - knots[i]
        d2 = knots[i + 4] - knots[i + 1]
        t1 = np.where(d1 > 0, quad[:, a] / np.where(d1 > 0, d1, 1.0), 0.0)
        t2 = np.where(d2 > 0, quad[:, a + 1] / np.where(d2 > 0, d2, 1.0), 0.0)
        dB[:, a] = 3.0 * (t1 - t2)
    return first.reshape(shape), Nb.reshape(shape + (4,)), dB.reshape(shape + (4,))


class SplineSampler:
    """Basis data of one spline size at a fixed set of points.

    Keeps the flat coefficient indices and tensor weights so that values,
    position gradients and coefficient adjoints are cheap to repeat.
    """

    def __init__(self, n: int, px, py):
        self.n = n
        px = np.ravel(px)
        py = np.ravel(py)
        kx, self.Bx, self.dBx = basis_functions(px, n)
        ky, self.By, self.dBy = basis_functions(py, n)
        off = np.arange(4)
        self.idx = (kx[:, None, None] + off[None, :, None]) * n + (ky[:, None, None] + off[None, None, :])
        self.inside_x = (px >= 0) & (px <= 1)
        self.inside_y = (py >= 0) & (py <= 1)

    def values(self, coeffs: np.ndarray) -> np.ndarray:
        C = np.asarray(coeffs).ravel()[self.idx]
        return np.einsum("pab,pa,pb->p", C, self.Bx, self.By)

    def values_and_pos_grad(self, coeffs: np.ndarray):
        C = np.asarray(coeffs).ravel()[self.idx]
        cy = np.einsum("pab,pb->pa", C, self.By)
        f = np.einsum("pa,pa->p", cy, self.Bx)
        fx = np.einsum("pa,pa->p", cy, self.dBx) * self.inside_x
        fy = np.einsum("pab,pa,pb->p", C, self.Bx, self.dBy) * self.inside_y
        return f, fx, fy

    def coeff_adjoint(self, r: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_p r_p f(x_p)`` with respect to the coefficients."""
        w = r[:, None, None] * self.Bx[:, :, None] * self.By[:, None, :]
        return np.bincount(self.idx.ravel(), weights=w.ravel(),
                           minlength=self.n * self.n).reshape(self.n, self.n)

    def coeff_adjoint_sq(self, r: np.ndarray) -> np.ndarray:
        """``sum_p r_p (d f(x_p) / d p_kl)^2`` for every coefficient."""
        w = r[:, None, None] * (self.Bx[:, :, None] * self.By[:, None, :]) ** 2
        return np.bincount(self.idx.ravel(), weights=w.ravel(),
                           minlength=self.n * self.n).reshape(self.n, self.n)

    def coeff_weights(self):
        """Flat indices and weights of the (at most 16) active coefficients per point."""
        w = self.Bx[:, :, None] * self.By[:, None, :]
        return self.idx.reshape(-1, 16), w.reshape(-1, 16)


@dataclass(frozen=True)
class SplineImage:
    """``f(x1, x2) = sum_kl p_kl phi_k(x1) phi_l(x2)``; ``coeffs[k, l]`` pairs with ``x1``, ``x2``."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("spline coefficients must be a square matrix")
        if c.shape[0] < 4:
            raise ValueError("a cubic spline basis needs n >= 4")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    @classmethod
    def constant(cls, n: int, value: float) -> "SplineImage":
        return cls(np.full((n, n), float(value)))

    def __call__(self, px, py):
        return spline_eval(self, px, py)

    def render(self, M: int, N: int) -> PixelImage:
        X, Y = pixel_coordinates(M, N)
        return PixelImage(spline_eval(self, X, Y))

    def save(self, path) -> None:
        save_image(self.coeffs, path)

    @classmethod
    def load(cls, path) -> "SplineImage":
        return cls(load_image(path).values)


def spline_eval(spline: SplineImage, px, py):
    px = np.asarray(px, float)
    return SplineSampler(spline.n, px, py).values(spline.coeffs).reshape(px.shape)


def spline_grad_coeffs(spline: SplineImage, p):
    """Sparse coefficient gradient of ``f(p)``: flat indices ``k*n + l`` and weights."""
    s = SplineSampler(spline.n, [p[0]], [p[1]])
    idx, w = s.coeff_weights()
    return idx[0], w[0]


def spline_grad_pos(spline: SplineImage, p) -> np.ndarray:
    s = SplineSampler(spline.n, [p[0]], [p[1]])
    _, fx, fy = s.values_and_pos_grad(spline.coeffs)
    return np.array([fx[0], fy[0]])


def _least_squares_coeffs(sampler: SplineSampler, tv: np.ndarray, n: int) -> np.ndarray:
    """Exact L2 fit through the sparse normal equations (tiny ridge for the corners)."""
    idx, w = sampler.coeff_weights()
    rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
    A = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(idx.shape[0], n * n))
    AtA = (A.T @ A).tocsc()
    ridge = 1e-12 * float(AtA.diagonal().max())
    return spla.spsolve(AtA + ridge * sp.identity(n * n, format="csc"), A.T @ tv)


def fit_spline_to_image(target, n: int = 64, fidelity: str = "poisson", tol: float | None = None,
                        max_iter: int = 3000) -> SplineImage:
    """Fit spline coefficients to a raster.

    ``fidelity="l2"`` is solved exactly as a sparse linear least-squares
    problem.  The Poisson fit (sum of ``u - v log u`` over pixels) starts from
    that solution and runs BFGS in coordinates scaled by the diagonal of the
    Fisher curvature.  The default tolerance on the gradient norm is
    relative to the gradient at the start.
    """
    from .fidelity import poisson_floor
    from .optim import SmoothObjective, bfgs_minimize

    t = target.values if isinstance(target, PixelImage) else np.asarray(target, float)
    if fidelity not in ("poisson", "l2"):
        raise ValueError(f"unknown fidelity {fidelity!r}")
    N, M = t.shape
    X, Y = pixel_coordinates(M, N)
    sampler = SplineSampler(n, X, Y)
    tv = t.ravel()
    c_ls = _least_squares_coeffs(sampler, tv, n)
    if fidelity == "l2":
        if not np.all(np.isfinite(c_ls)):
            raise SplineFitError("least-squares spline fit failed")
        return SplineImage(c_ls.reshape(n, n))
    if np.any(tv < 0):
        raise ValueError("Poisson fidelity needs nonnegative targets")

    eps = poisson_floor(tv)
    mean = float(tv.mean())
    pos = tv > 0

    def value_grad_c(c):
        # deviance form: the NLL minus its constant floor, for precision
        f = sampler.values(c)
        ff = np.maximum(f, eps)
        dev = ff - tv
        dev[pos] -= tv[pos] * np.log(ff[pos] / tv[pos])
        r = np.where(f > eps, 1.0 - tv / ff, 0.0)
        return float(np.sum(dev)), sampler.coeff_adjoint(r).ravel()

    c0 = c_ls
    if sampler.values(c0).min() <= 1e3 * eps:
        # nonnegative coefficients give a positive spline, away from the floor
        c0 = np.maximum(c0, 1e-3 * max(mean, eps))
    curv = 1.0 / np.maximum(tv, max(1e-3 * mean, eps))
    diag = sampler.coeff_adjoint_sq(curv).ravel()
    scale = 1.0 / np.sqrt(np.maximum(diag, 1e-12 * max(diag.max(), 1e-300)))

    def value_grad_z(z):
        val, g = value_grad_c(z * scale)
        return val, g * scale

    _, g0 = value_grad_c(c0)
    tol = 1e-6 * max(float(np.linalg.norm(g0)), np.sqrt(tv.size)) if tol is None else tol
    z, report = bfgs_minimize(SmoothObjective(value_grad_z), c0 / scale, tol=tol * float(scale.min()),
                              max_iter=max_iter, memory=30, ftol=1e-13)
    c = z * scale
    gnorm = float(np.linalg.norm(value_grad_c(c)[1]))
    if not np.all(np.isfinite(c)) or (not report.converged and gnorm > tol):
        raise SplineFitError(f"spline fit did not converge: {report.message}, "
                             f"{report.iterations} iterations, |grad| = {gnorm:.3e}")
    return SplineImage(c.reshape(n, n))


# --- Gaussian bump model ----------------------------------------------------

@dataclass(frozen=True)
class BumpImage:
    """Sum of isotropic Gaussians ``a exp(-|x - y|^2 / (2 sigma^2))`` plus an offset.

    Centres and widths are in domain units.
    """

    centers: np.ndarray
    amplitudes: np.ndarray
    widths: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64).reshape(-1, 2)
        a = np.array(self.amplitudes, dtype=np.float64).ravel()
        w = np.array(self.widths, dtype=np.float64).ravel()
        if not (len(c) == len(a) == len(w)):
            raise ValueError("centers, amplitudes and widths must have one entry per atom")
        if np.any(w <= 0):
            raise ValueError("Gaussian widths must be positive")
        for arr in (c, a, w):
            arr.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "widths", w)
        object.__setattr__(self, "offset", float(self.offset))

    def __len__(self) -> int:
        return len(self.amplitudes)

    def __call__(self, px, py):
        return bump_eval(self, px, py)

    def render(self, M: int, N: int) -> PixelImage:
        X, Y = pixel_coordinates(M, N)
        return PixelImage(bump_eval(self, X, Y))

    def shifted(self, t) -> "BumpImage":
        return BumpImage(self.centers + np.asarray(t, float), self.amplitudes, self.widths, self.offset)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("l,y_x,y_y,a,sigma\n")
            for l, ((yx, yy), a, s) in enumerate(zip(self.centers, self.amplitudes, self.widths)):
                fh.write(f"{l},{float(yx)!r},{float(yy)!r},{float(a)!r},{float(s)!r}\n")
            fh.write(f"offset,{float(self.offset)!r},,,\n")

    @classmethod
    def from_csv(cls, path) -> "BumpImage":
        rows = [line.strip().split(",") for line in open(path).read().splitlines()[1:] if line.strip()]
        atoms = [r for r in rows if r[0] != "offset"]
        offset = float(next(r[1] for r in rows if r[0] == "offset"))
        arr = np.array([[float(v) for v in r[1:5]] for r in atoms]).reshape(-1, 4)
        return cls(arr[:, :2], arr[:, 2], arr[:, 3], offset)


def bump_eval(bump: BumpImage, px, py):
    px = np.asarray(px, float)
    py = np.asarray(py, float)
    out = np.full(px.shape, bump.offset)
    for (yx, yy), a, s in zip(bump.centers, bump.amplitudes, bump.widths):
        out = out + a * np.exp(-((px - yx) ** 2 + (py - yy) ** 2) / (2 * s * s))
    return out


def bump_grads(bump: BumpImage, px, py):
    """Gradients of ``f(p)`` at points with respect to all parameters and ``p``.

    Returns a dict with ``centers`` ``(P, L, 2)``, ``amplitudes`` and
    ``widths`` ``(P, L)``, ``offset`` ``(P,)`` and ``x`` ``(P, 2)``.
    """
    px = np.atleast_1d(np.asarray(px, float)).ravel()
    py = np.atleast_1d(np.asarray(py, float)).ravel()
    dx = px[:, None] - bump.centers[None, :, 0]
    dy = py[:, None] - bump.centers[None, :, 1]
    s2 = bump.widths[None, :] ** 2
    r2 = dx * dx + dy * dy
    e = np.exp(-r2 / (2 * s2))
    ae = bump.amplitudes[None, :] * e
    return {
        "centers": np.stack([ae * dx / s2, ae * dy / s2], axis=-1),
        "amplitudes": e,
        "widths": ae * r2 / (s2 * bump.widths[None, :]),
        "offset": np.ones(px.size),
        "x": -np.stack([np.sum(ae * dx / s2, axis=1), np.sum(ae * dy / s2, axis=1)], axis=-1),
    }


def detect_atoms_for_init(img, sigma_px: float | None = None, threshold: float | None = None,
                          min_distance: int | None = None) -> BumpImage:
    """Initial Gaussian model from smoothed local maxima and local moments.

    ``sigma_px`` is the expected atom width in pixels (estimated from the
    brightest peak when omitted).  Peaks are kept when their smoothed height
    above the background exceeds ``threshold`` (default: half the height of
    the brightest peak).
    """
    v = img.values if isinstance(img, PixelImage) else np.asarray(img, float)
    N, M = v.shape
    s_guess = 2.0 if sigma_px is None else float(sigma_px)
    smooth = ndimage.gaussian_filter(v, max(0.5, 0.5 * s_guess), mode="nearest")
    bg = float(np.percentile(smooth, 10))
    size = min_distance or max(3, int(round(1.5 * s_guess)) | 1)
    peaks = (smooth == ndimage.maximum_filter(smooth, size=size, mode="nearest"))
    heights = smooth - bg
    thr = 0.5 * float(heights[peaks].max()) if threshold is None else float(threshold)
    peaks &= heights > thr
    # tied maxima (an atom midway between pixels) form one plateau; keep its first pixel
    labels, count = ndimage.label(peaks, structure=np.ones((3, 3)))
    if count == 0:
        raise NoPeaksError("no peaks above the detection threshold")
    flat = labels.ravel()
    first = np.unique(flat, return_index=True)[1][1:]
    jj, ii = np.unravel_index(first, labels.shape)
    order = np.lexsort((ii, jj))
    jj, ii = jj[order], ii[order]

    centers, amps, widths = [], [], []
    rad = int(np.ceil(2.0 * s_guess))
    yy, xx = np.mgrid[0:N, 0:M]
    for j, i in zip(jj, ii):
        win = (np.abs(xx - i) <= rad) & (np.abs(yy - j) <= rad)
        w = np.clip(v[win] - bg, 0.0, None)
        tot = w.sum()
        if tot <= 0:
            continue
        cx = float((w * xx[win]).sum() / tot)
        cy = float((w * yy[win]).sum() / tot)
        if sigma_px is None:
            var = float((w * ((xx[win] - cx) ** 2 + (yy[win] - cy) ** 2)).sum() / (2 * tot))
            sig = max(0.5, np.sqrt(var))
        else:
            sig = float(sigma_px)
        centers.append(((cx + 0.5) / M, (cy + 0.5) / N))
        amps.append(float(max(v[j, i] - bg, 1e-12)))
        widths.append(sig / np.sqrt(M * N))
    if not centers:
        raise NoPeaksError("no peaks above the detection threshold")
    return BumpImage(np.array(centers), np.array(amps), np.array(widths), max(bg, 0.0))
