"""End-to-end reconstruction drivers.

``nrr_reconstruct``       iterative non-rigid registration to a running average.
``nrr_plus_reconstruct``  the same with a global bias correction after each sweep.
``jud_reconstruct``       joint spline image model, rigid drift and scanline shifts
                          fitted to the raw counts under a Poisson likelihood.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ImageSeries, PixelImage, average_frames, pixel_coordinates, sample_bilinear, save_image
from .deform import (GridDeformation, RigidMotion, ScanlineShiftField, bias_correction_psi,
                     brownian_regularizer, compose_grid, fold_penalty, interpolation_matrix,
                     jacobian_regularizer, psi_residual, rigid_inverse, save_grid,
                     tikhonov_regularizer, write_rigid_csv, write_shift_csv)
from .fidelity import EmptyOverlapError, ncc_with_grad, poisson_floor, warp_image
from .imagemodel import SplineImage, SplineSampler, fit_spline_to_image
from .optim import SmoothObjective, SolverReport, bfgs_minimize, trust_region_minimize

log = logging.getLogger(__name__)


class ReconstructionError(RuntimeError):
    """A reconstruction step failed; ``partial`` holds what was computed so far."""

    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


@dataclass
class LossConfig:
    """Weights and schedule shared by the reconstruction methods.

    ``brownian_weight`` is Lambda / (2 dt); ``line_time_ratio`` is dT / dt and
    is only used when the series carries no timing of its own.
    ``shift_units`` is the unit in which the shift regularizers measure
    shifts: ``"pixel"`` or ``"domain"`` (a 64 px frame makes the latter
    4096 times weaker per component).
    """

    lam: Optional[float] = None
    mu: float = 0.0
    brownian_weight: float = 50.0
    line_time_ratio: float = 1000.0
    dwell_time: Optional[float] = None
    line_time: Optional[float] = None
    nu_hor: float = 25.9
    nu_vert: float = 71.4
    n_spline: int = 64
    average: str = "median"
    domain_policy: str = "union"
    max_outer: int = 20
    outer_tol: float = 1e-4
    inner_iter: int = 50
    levels: int = 3
    pixels_per_node: int = 8
    rigid_outer: int = 2
    stage_iter: tuple = (150, 200, 200)
    first_line_inline: bool = True
    shift_units: str = "pixel"

    def __post_init__(self):
        if self.shift_units not in ("pixel", "domain"):
            raise ValueError(f"unknown shift units {self.shift_units!r}")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.mu != 0:
            raise ValueError("no image regularizer is implemented; mu must be 0")
        if self.nu_hor <= 0 or self.nu_vert <= 0 or self.brownian_weight <= 0:
            raise ValueError("regularizer weights must be positive")

    def times(self, series: Optional[ImageSeries] = None):
        dt = self.dwell_time or (series.dwell_time if series is not None else 1.0e-5)
        if self.line_time is not None:
            dT = self.line_time
        elif self.dwell_time is None and series is not None:
            dT = series.line_time
        else:
            dT = self.line_time_ratio * dt
        return 2.0 * self.brownian_weight * dt, dt, dT

    def snapshot(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))


@dataclass
class ReconstructionResult:
    method: str
    image: PixelImage
    model: object = None
    grids: Optional[list] = None
    rigid: Optional[list] = None
    shifts: Optional[list] = None
    loss_trace: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    converged: bool = True
    config: Optional[LossConfig] = None
    extras: dict = field(default_factory=dict)

    @property
    def frame_count(self) -> int:
        for seq in (self.grids, self.rigid, self.shifts):
            if seq is not None:
                return len(seq)
        return 0

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_image(self.image, out / "image.rsim")
        if isinstance(self.model, SplineImage):
            self.model.save(out / "model_spline.rsim")
        if self.grids is not None:
            for k, g in enumerate(self.grids):
                save_grid(g, out / f"grid_{k:04d}.rsis")
        if self.rigid is not None:
            write_rigid_csv(out / "rigid.csv", self.rigid)
        if self.shifts is not None:
            write_shift_csv(out / "shifts.csv", self.shifts)
        with open(out / "loss_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.loss_trace):
                w.writerow([i, repr(float(v))])
        for name, rep in self.reports.items():
            if isinstance(rep, SolverReport):
                rep.to_csv(out / f"solver_{name}.csv")
        cfg = self.config.snapshot() if self.config is not None else ""
        (out / "config.txt").write_text(f"method={self.method!r}\nconverged={self.converged!r}\n" + cfg)


def render_model(result: ReconstructionResult, M: int, N: int) -> PixelImage:
    """Sample the reconstructed continuous model at the pixel centres of an ``M x N`` raster."""
    model = result.model
    if isinstance(model, PixelImage) or model is None:
        base = result.image if model is None else model
        X, Y = pixel_coordinates(M, N)
        return PixelImage(sample_bilinear(base.values, X, Y))
    return model.render(M, N)


# --- registration ---------------------------------------------------------

def downsample(img: np.ndarray) -> np.ndarray:
    N, M = img.shape
    return img[: N - N % 2, : M - M % 2].reshape(N // 2, 2, M // 2, 2).mean(axis=(1, 3))


def pyramid(img: np.ndarray, levels: int) -> list:
    """Fine-to-coarse list of 2x2 block averages (stops before images get tiny)."""
    out = [np.asarray(img, float)]
    while len(out) < levels and min(out[-1].shape) >= 16 and all(s % 2 == 0 for s in out[-1].shape):
        out.append(downsample(out[-1]))
    return out


def _ncc_at(u, v, qx, qy, policy):
    w, gx, gy = sample_bilinear(v, qx, qy, with_grad=True)
    mask = (qx >= 0) & (qx <= 1) & (qy >= 0) & (qy <= 1)
    try:
        val, dw = ncc_with_grad(u, w, None, mask, policy)
    except EmptyOverlapError:
        # a trial step moved v off the domain; the line search backs off on inf
        zero = np.zeros_like(qx)
        return np.inf, zero, zero
    return val, dw * gx, dw * gy


def _grid_cells(M, N, pixels_per_node):
    return max(1, round(N / pixels_per_node)), max(1, round(M / pixels_per_node))


def _grid_loss(u, v, ny, nx, lam, policy):
    N, M = u.shape
    X, Y = pixel_coordinates(M, N)
    W = interpolation_matrix(ny, nx, X, Y)
    Xr, Yr = X.ravel(), Y.ravel()
    fold_w = 1e4 * max(lam, 1e-3)

    def value_grad(vec):
        d = vec.reshape(-1, 2)
        qx = Xr + W @ d[:, 0]
        qy = Yr + W @ d[:, 1]
        val, gx, gy = _ncc_at(u.ravel(), v, qx, qy, policy)
        g = np.stack([W.T @ gx, W.T @ gy], axis=1)
        phi = GridDeformation.from_vector(vec, ny, nx)
        r, gr = jacobian_regularizer(phi)
        p, gp = fold_penalty(phi, fold_w)
        return val + lam * r + p, (g + lam * gr.reshape(-1, 2) + gp.reshape(-1, 2)).ravel()

    return value_grad


def auto_lambda(u: np.ndarray, v: np.ndarray, policy: str = "union", pixels_per_node: int = 8) -> float:
    """Weight making the NCC term and a reference deformation's R of equal size.

    Evaluated on the coarsest pyramid level: the reference deformation moves
    the nodes alternately by plus and minus a quarter cell along x.
    """
    uc, vc = pyramid(u, 3)[-1], pyramid(v, 3)[-1]
    N, M = uc.shape
    ny, nx = _grid_cells(M, N, pixels_per_node)
    d = np.zeros((ny + 1, nx + 1, 2))
    a, b = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    d[..., 0] = np.where((a + b) % 2 == 0, 0.25, -0.25) / nx
    ref, _ = jacobian_regularizer(GridDeformation(d))
    X, Y = pixel_coordinates(M, N)
    val, _, _ = _ncc_at(uc.ravel(), vc, X.ravel(), Y.ravel(), policy)
    return abs(val) / max(ref, 1e-12)


def _rigid_search(u, v, base: GridDeformation, radius: int, angles, policy):
    """Best translation (integer pixels of this level) and rotation applied on top of ``base``."""
    N, M = u.shape
    X, Y = pixel_coordinates(M, N)
    px, py = base(X, Y)
    best = None
    for th in angles:
        c, s = np.cos(th), np.sin(th)
        rx = c * (px - 0.5) - s * (py - 0.5) + 0.5
        ry = s * (px - 0.5) + c * (py - 0.5) + 0.5
        for ty in range(-radius, radius + 1):
            for tx in range(-radius, radius + 1):
                qx, qy = rx + tx / M, ry + ty / N
                mask = (qx >= 0) & (qx <= 1) & (qy >= 0) & (qy <= 1)
                if mask.sum() < 0.25 * mask.size:
                    continue
                w = sample_bilinear(v, qx, qy)
                try:
                    val = ncc_with_grad(u, w, None, mask, policy)[0]
                except ValueError:
                    continue
                key = (round(val, 12), abs(tx) + abs(ty), abs(th))
                if best is None or key < best[0]:
                    best = (key, th, tx / M, ty / N)
    return best


def _apply_rigid_to_grid(phi: GridDeformation, th, tx, ty) -> GridDeformation:
    qx, qy = phi.node_positions()
    c, s = np.cos(th), np.sin(th)
    rx = c * (qx - 0.5) - s * (qy - 0.5) + 0.5 + tx
    ry = s * (qx - 0.5) + c * (qy - 0.5) + 0.5 + ty
    X, Y = phi.node_positions_for(phi.ny, phi.nx)
    return GridDeformation(np.stack([rx - X, ry - Y], axis=-1))


DEFAULT_ANGLES = tuple(np.deg2rad([-1.0, -0.5, 0.0, 0.5, 1.0]))


def register_pair(u, v, lam: Optional[float] = None, init: Optional[GridDeformation] = None,
                  levels: int = 3, max_iter: int = 50, pixels_per_node: int = 8,
                  policy: str = "union", search: bool = True,
                  angles=DEFAULT_ANGLES) -> GridDeformation:
    """Non-rigid registration: minimize ``NCC(u, v o phi) + lam R(phi)`` coarse to fine.

    A rigid search (integer translations and a small angle sweep on the
    coarsest level) precedes the optimisation.  The returned deformation
    is expressed on the finest level's control grid; it never has a larger
    loss than ``init``.
    """
    u = u.values if isinstance(u, PixelImage) else np.asarray(u, float)
    v = v.values if isinstance(v, PixelImage) else np.asarray(v, float)
    if u.shape != v.shape:
        raise ValueError("images must have the same shape")
    N, M = u.shape
    ny, nx = _grid_cells(M, N, pixels_per_node)
    if init is None:
        init = GridDeformation.identity(ny, nx)
    if (init.ny, init.nx) != (ny, nx):
        init = init.refine_to(ny, nx)
    if lam is None:
        lam = auto_lambda(u, v, policy, pixels_per_node)

    us, vs = pyramid(u, levels), pyramid(v, levels)
    coarse_cells = [_grid_cells(a.shape[1], a.shape[0], pixels_per_node) for a in us]
    phi = init
    for lvl in range(len(us) - 1, -1, -1):
        cy, cx = coarse_cells[lvl]
        ul, vl = us[lvl], vs[lvl]
        start = phi.refine_to(cy, cx) if (phi.ny, phi.nx) != (cy, cx) else phi
        if lvl == len(us) - 1 and search:
            radius = max(1, min(ul.shape) // 8)
            found = _rigid_search(ul, vl, start, radius, angles, policy)
            if found is not None:
                start = _apply_rigid_to_grid(start, found[1], found[2], found[3])
        fun = _grid_loss(ul, vl, cy, cx, lam, policy)
        x, _ = bfgs_minimize(SmoothObjective(fun), start.to_vector(), tol=1e-9, max_iter=max_iter)
        phi = GridDeformation.from_vector(x, cy, cx)
    phi = phi.refine_to(ny, nx) if (phi.ny, phi.nx) != (ny, nx) else phi

    fine = _grid_loss(u, v, ny, nx, lam, policy)
    if fine(phi.to_vector())[0] > fine(init.to_vector())[0]:
        return init
    return phi


def _rigid_loss(u, v, policy):
    N, M = u.shape
    X, Y = pixel_coordinates(M, N)
    Xr, Yr = X.ravel() - 0.5, Y.ravel() - 0.5
    ur = u.ravel()
    # parameters: (theta * M / 2, tx * M, ty * N) keep the unknowns near pixel scale
    sc = np.array([2.0 / M, 1.0 / M, 1.0 / N])

    def value_grad(z):
        th, tx, ty = z * sc
        c, s = np.cos(th), np.sin(th)
        qx = c * Xr - s * Yr + 0.5 + tx
        qy = s * Xr + c * Yr + 0.5 + ty
        val, gx, gy = _ncc_at(ur, v, qx, qy, policy)
        dth = float(np.sum(gx * (-s * Xr - c * Yr) + gy * (c * Xr - s * Yr)))
        return val, np.array([dth, gx.sum(), gy.sum()]) * sc

    return value_grad, sc


def register_rigid(u, v, init: Optional[RigidMotion] = None, levels: int = 3, max_iter: int = 50,
                   policy: str = "union", search: bool = True, angles=DEFAULT_ANGLES) -> RigidMotion:
    """Rigid registration: the motion ``phi`` with ``v o phi`` closest to ``u`` in NCC."""
    u = u.values if isinstance(u, PixelImage) else np.asarray(u, float)
    v = v.values if isinstance(v, PixelImage) else np.asarray(v, float)
    init = init or RigidMotion()
    # centre-based parameters of the initial motion
    R = init.matrix
    c0 = np.array([0.5, 0.5])
    t0 = np.asarray(init.v) + R @ c0 - c0
    params = np.array([init.theta, t0[0], t0[1]])
    us, vs = pyramid(u, levels), pyramid(v, levels)
    for lvl in range(len(us) - 1, -1, -1):
        ul, vl = us[lvl], vs[lvl]
        if lvl == len(us) - 1 and search:
            base = GridDeformation.from_map(RigidMotion.about_center(params[0], params[1:]), 1, 1)
            found = _rigid_search(ul, vl, base, max(1, min(ul.shape) // 8), angles, policy)
            if found is not None:
                _, th, tx, ty = found
                c, s = np.cos(th), np.sin(th)
                t = np.array([[c, -s], [s, c]]) @ params[1:] + np.array([tx, ty])
                params = np.array([params[0] + th, t[0], t[1]])
        fun, sc = _rigid_loss(ul, vl, policy)
        z, _ = bfgs_minimize(SmoothObjective(fun), params / sc, tol=1e-10, max_iter=max_iter)
        params = z * sc
    return RigidMotion.about_center(params[0], params[1:])


# --- NRR / NRR+ -------------------------------------------------------------

def _pullbacks(frames, phis):
    out, masks = [], []
    for g, phi in zip(frames, phis):
        w, m = warp_image(g, phi)
        out.append(w)
        masks.append(m.astype(float))
    return np.stack(out), np.stack(masks)


def _nrr_loss(f, warped, masks, phis, lam, policy):
    total = 0.0
    for w, m, phi in zip(warped, masks, phis):
        total += ncc_with_grad(f, w, None, m > 0, policy)[0] + lam * jacobian_regularizer(phi)[0]
    return total


def _nrr(series: ImageSeries, config: LossConfig, plus: bool) -> ReconstructionResult:
    frames = series.stack() if isinstance(series, ImageSeries) else np.asarray(series, float)
    K = len(frames)
    if K < 2:
        raise ValueError("non-rigid reconstruction needs at least two frames")
    N, M = frames.shape[1:]
    ny, nx = _grid_cells(M, N, config.pixels_per_node)
    lam = config.lam if config.lam is not None else auto_lambda(frames[0], frames[1],
                                                                config.domain_policy,
                                                                config.pixels_per_node)
    kw = dict(levels=config.levels, max_iter=config.inner_iter,
              pixels_per_node=config.pixels_per_node, policy=config.domain_policy)
    method = "nrrplus" if plus else "nrr"
    pairs = []
    for k in range(K - 1):
        try:
            pairs.append(register_pair(frames[k], frames[k + 1], lam, None, **kw))
        except ValueError as exc:
            raise ReconstructionError(f"registration of frame {k + 1} to frame {k} failed: {exc}")

    ident = GridDeformation.identity(ny, nx)
    phis = [ident] * K
    f0 = frames[0].copy()
    trace, psi_trace = [], []
    converged = False
    for it in range(config.max_outer):
        new = []
        for k in range(K):
            init = phis[0] if k == 0 else compose_grid(pairs[k - 1], new[k - 1])
            try:
                new.append(register_pair(f0, frames[k], lam, init, search=(k == 0 and it == 0), **kw))
            except ValueError as exc:
                raise ReconstructionError(f"registration of frame {k} failed: {exc}")
        if plus:
            psi = bias_correction_psi(new)
            before = psi_residual(new, GridDeformation.identity(ny, nx))
            after = psi_residual(new, psi)
            psi_trace.append((before, after))
            new = [compose_grid(phi, psi) for phi in new]
        warped, masks = _pullbacks(frames, new)
        f = average_frames(list(warped), config.average, weights=masks).values
        loss = _nrr_loss(f, warped, masks, new, lam, config.domain_policy)
        if trace and loss > trace[-1]:
            log.info("%s: outer iteration %d raised the loss, keeping the previous iterate", method, it)
            converged = True
            break
        change = np.linalg.norm(f - f0) / max(np.linalg.norm(f0), 1e-300)
        trace.append(loss)
        phis, f_prev, f0 = new, f0, f
        if change <= config.outer_tol:
            converged = True
            break
    image = PixelImage(f0)
    return ReconstructionResult(method, image, image, grids=phis, loss_trace=trace,
                                converged=converged, config=config,
                                extras={"lambda": lam, "psi_residuals": psi_trace})


def nrr_reconstruct(series, config: Optional[LossConfig] = None, **overrides) -> ReconstructionResult:
    config = _config(config, overrides)
    return _nrr(series, config, plus=False)


def nrr_plus_reconstruct(series, config: Optional[LossConfig] = None, **overrides) -> ReconstructionResult:
    config = _config(config, overrides)
    return _nrr(series, config, plus=True)


def _config(config, overrides) -> LossConfig:
    config = config or LossConfig()
    if overrides:
        config = LossConfig(**{**asdict(config), **overrides})
    return config


# --- JUD --------------------------------------------------------------------

@dataclass
class JudParams:
    coeffs: np.ndarray          # (n, n)
    rigid: np.ndarray           # (K, 3): theta, v_x, v_y
    shifts: np.ndarray          # (K, N, M, 2), domain units

    def copy(self) -> "JudParams":
        return JudParams(self.coeffs.copy(), self.rigid.copy(), self.shifts.copy())


class JudProblem:
    """The joint objective over the spline coefficients, rigid motions and shifts.

    Sum over frames and pixels of ``poisson_nll(f(R_k (x_ij + s_ij) + v_k), d_kij)``
    plus the Brownian and Tikhonov shift regularizers of every frame.
    """

    def __init__(self, frames, n: int, Lam: float, dt: float, dT: float, nu_hor: float,
                 nu_vert: float, first_line_inline: bool = True, shift_units: str = "pixel"):
        self.d = np.asarray(frames, dtype=np.float64)
        if np.any(self.d < 0):
            raise ValueError("counts must be nonnegative")
        self.K, self.N, self.M = self.d.shape
        self.n = n
        self.Lam, self.dt, self.dT = Lam, dt, dT
        self.nu = (nu_hor, nu_vert)
        self.first_line_inline = first_line_inline
        self.X, self.Y = pixel_coordinates(self.M, self.N)
        # shifts are stored in domain units; the regularizers see them in ``shift_units``
        self.unit = np.array([self.M, self.N], float) if shift_units == "pixel" else np.ones(2)
        self.eps = poisson_floor(self.d)
        d = self.d[self.d > 0]
        self.floor = float(np.sum(d - d * np.log(d)))

    def positions(self, rigid, shifts):
        th = rigid[:, 0][:, None, None]
        c, s = np.cos(th), np.sin(th)
        px = self.X[None] + shifts[..., 0]
        py = self.Y[None] + shifts[..., 1]
        qx = c * px - s * py + rigid[:, 1][:, None, None]
        qy = s * px + c * py + rigid[:, 2][:, None, None]
        return px, py, qx, qy, c, s

    def evaluate(self, p: JudParams, want_grad: bool = True):
        """Cost parts and, optionally, gradients for every parameter block."""
        for name, arr in (("coefficients", p.coeffs), ("rigid motions", p.rigid), ("shifts", p.shifts)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name}")
        px, py, qx, qy, c, s = self.positions(p.rigid, p.shifts)
        sampler = SplineSampler(self.n, qx, qy)
        f, fx, fy = sampler.values_and_pos_grad(p.coeffs)
        d = self.d.ravel()
        ff = np.maximum(f, self.eps)
        # the deviance differs from the NLL by a constant but keeps its precision
        pos = d > 0
        dev = ff - d
        dev[pos] -= d[pos] * np.log(ff[pos] / d[pos])
        deviance = float(np.sum(dev))
        data = deviance + self.floor
        r1 = r2 = 0.0
        g_s = np.zeros_like(p.shifts)
        for k in range(self.K):
            sk = p.shifts[k] * self.unit
            a, ga = brownian_regularizer(sk, self.Lam, self.dt, self.dT, self.first_line_inline)
            b, gb = tikhonov_regularizer(sk, *self.nu)
            r1 += a
            r2 += b
            g_s[k] = (ga + gb) * self.unit
        parts = {"data": data, "R1": r1, "R2": r2, "total": data + r1 + r2,
                 "objective": deviance + r1 + r2}
        if not want_grad:
            return parts, None
        r = np.where(f > self.eps, 1.0 - d / ff, 0.0)
        g_c = sampler.coeff_adjoint(r)
        gqx = (r * fx).reshape(qx.shape)
        gqy = (r * fy).reshape(qy.shape)
        g_s[..., 0] += c * gqx + s * gqy
        g_s[..., 1] += -s * gqx + c * gqy
        g_th = np.sum(gqx * (-s * px - c * py) + gqy * (c * px - s * py), axis=(1, 2))
        g_r = np.stack([g_th, gqx.sum(axis=(1, 2)), gqy.sum(axis=(1, 2))], axis=1)
        return parts, JudParams(g_c, g_r, g_s)

    def fisher_diagonal(self, p: JudParams) -> JudParams:
        """Diagonal of the expected curvature, used to rescale the unknowns."""
        px, py, qx, qy, c, s = self.positions(p.rigid, p.shifts)
        sampler = SplineSampler(self.n, qx, qy)
        f, fx, fy = sampler.values_and_pos_grad(p.coeffs)
        floor = max(self.eps, 1e-3 * max(float(np.mean(self.d)), 1e-300))
        w = 1.0 / np.maximum(f, floor)
        h_c = sampler.coeff_adjoint_sq(w)
        fx = fx.reshape(qx.shape)
        fy = fy.reshape(qy.shape)
        w = w.reshape(qx.shape)
        sx = c * fx + s * fy
        sy = -s * fx + c * fy
        h_s = np.stack([w * sx * sx, w * sy * sy], axis=-1)
        reg = np.zeros((self.N, self.M))
        reg[:, 1:] += self.Lam / self.dt
        reg[:, :-1] += self.Lam / self.dt
        reg[1:, 0] += self.Lam / self.dT
        reg[:-1, -1] += self.Lam / self.dT
        reg[0, 0] += self.Lam / self.dt
        h_s = h_s + (reg[None, :, :, None] + np.array(self.nu)) * self.unit ** 2
        dth = fx * (-s * px - c * py) + fy * (c * px - s * py)
        h_r = np.stack([np.sum(w * dth * dth, axis=(1, 2)), np.sum(w * fx * fx, axis=(1, 2)),
                        np.sum(w * fy * fy, axis=(1, 2))], axis=1)
        return JudParams(h_c, h_r, h_s)


def jud_objective(shifts, spline, rigid, frames, config: Optional[LossConfig] = None,
                  dwell_time: float = 1.0e-5, line_time: Optional[float] = None):
    """Cost decomposition and gradients of the joint objective.

    ``shifts`` is a list of ``ScanlineShiftField``, ``spline`` a ``SplineImage``
    and ``rigid`` a list of ``RigidMotion``.  Returns ``(parts, grads)`` with
    ``grads`` a ``JudParams`` of coefficient, rigid ``(theta, v_x, v_y)`` and
    per-pixel shift gradients.
    """
    config = config or LossConfig()
    frames = frames.stack() if isinstance(frames, ImageSeries) else np.asarray(frames, float)
    Lam = 2.0 * config.brownian_weight * dwell_time
    dT = line_time if line_time is not None else config.line_time_ratio * dwell_time
    prob = JudProblem(frames, spline.n, Lam, dwell_time, dT, config.nu_hor, config.nu_vert,
                      config.first_line_inline, config.shift_units)
    p = JudParams(np.array(spline.coeffs), np.array([[r.theta, r.v[0], r.v[1]] for r in rigid]),
                  np.stack([np.asarray(s.s) for s in shifts]))
    return prob.evaluate(p)


class _Stage:
    """Packs a subset of the JUD blocks into one scaled vector of offsets from ``base``.

    Frame 1 defines the reference coordinates, so its rigid motion is never
    among the unknowns.
    """

    max_shift_step = 0.1

    def __init__(self, prob: JudProblem, base: JudParams, blocks: tuple, per_line: bool = False):
        self.prob, self.base, self.blocks, self.per_line = prob, base, blocks, per_line
        h = prob.fisher_diagonal(base)
        parts, caps = [], []
        K, N, M = prob.d.shape
        # one scaled unit never moves a shift by more than a tenth of a pixel
        cap_s = self.max_shift_step / np.array([M, N], float)
        for b in blocks:
            if b == "shifts" and per_line:
                hb = h.shifts.sum(axis=2)
            elif b == "rigid":
                hb = h.rigid[1:]
            else:
                hb = getattr(h, b)
            parts.append(hb.ravel())
            cap = np.broadcast_to(cap_s, hb.shape) if b == "shifts" else np.full(hb.shape, np.inf)
            caps.append(np.ravel(cap))
        diag = np.concatenate(parts)
        floor = 1e-8 * max(float(np.median(diag)), 1e-300)
        self.scale = np.minimum(1.0 / np.sqrt(np.maximum(diag, floor)), np.concatenate(caps))
        # offsets from the starting point, so z = 0 reproduces it bit for bit
        self.origin = self._raw(base)

    def _raw(self, p: JudParams) -> np.ndarray:
        out = []
        for b in self.blocks:
            if b == "shifts" and self.per_line:
                out.append(p.shifts[:, :, 0, :].ravel())
            elif b == "rigid":
                out.append(p.rigid[1:].ravel())
            else:
                out.append(getattr(p, b).ravel())
        return np.concatenate(out)

    def pack(self, p: JudParams) -> np.ndarray:
        return (self._raw(p) - self.origin) / self.scale

    def unpack(self, z: np.ndarray) -> JudParams:
        x = self.origin + z * self.scale
        p = self.base.copy()
        pos = 0
        for b in self.blocks:
            if b == "shifts" and self.per_line:
                K, N, M, _ = p.shifts.shape
                size = K * N * 2
                lines = x[pos:pos + size].reshape(K, N, 1, 2)
                p.shifts = np.broadcast_to(lines, (K, N, M, 2)).copy()
            elif b == "rigid":
                size = p.rigid[1:].size
                p.rigid[1:] = x[pos:pos + size].reshape(-1, 3)
            else:
                arr = getattr(p, b)
                size = arr.size
                setattr(p, b, x[pos:pos + size].reshape(arr.shape))
            pos += size
        return p

    def grad_vector(self, g: JudParams) -> np.ndarray:
        out = []
        for b in self.blocks:
            if b == "shifts" and self.per_line:
                out.append(g.shifts.sum(axis=2).ravel())
            elif b == "rigid":
                out.append(g.rigid[1:].ravel())
            else:
                out.append(getattr(g, b).ravel())
        return np.concatenate(out) * self.scale

    def value_grad(self, z):
        # per-pixel mean, so solver tolerances do not depend on the data size
        p = self.unpack(z)
        parts, g = self.prob.evaluate(p)
        w = 1.0 / self.prob.d.size
        return w * parts["objective"], w * self.grad_vector(g)


def _run_stage(prob, params, blocks, per_line, max_iter, name, reports, trace):
    stage = _Stage(prob, params, blocks, per_line)
    z0 = stage.pack(params)
    f0, g0 = stage.value_grad(z0)
    # unknowns are whitened by the Fisher diagonal, so this stops once the remaining
    # Newton step is about a thousandth of a standard deviation per unknown (RMS)
    tol = 1e-3 * np.sqrt(z0.size) / prob.d.size
    z, rep = trust_region_minimize(SmoothObjective(stage.value_grad), z0, tol=tol, max_iter=max_iter,
                                   radius0=1.0, memory=20, ftol=1e-10)
    reports[name] = rep
    out = stage.unpack(z)
    trace.append(prob.evaluate(out, want_grad=False)[0]["total"])
    log.info("jud %s: %d iterations, loss %.6e -> %.6e (%s)", name, rep.iterations, f0,
             trace[-1], rep.message)
    return out, rep


def _rigid_to_array(motions):
    return np.array([[m.theta, m.v[0], m.v[1]] for m in motions], dtype=np.float64)


def rigid_initialization(frames: np.ndarray, config: LossConfig) -> list:
    """Rigid motions mapping reference (frame 1) coordinates into every frame.

    Consecutive frames are registered first; their chained composition seeds
    the registration of each frame against frame 1.
    """
    K = len(frames)
    kw = dict(levels=config.levels, max_iter=config.inner_iter, policy=config.domain_policy)
    # phi_k maps reference coordinates to frame k:  g_k o phi_k ~ g_1
    phis = [RigidMotion()]
    for k in range(1, K):
        step = register_rigid(frames[k - 1], frames[k], None, **kw)
        prev = phis[-1]
        chained = _compose_rigid(step, prev)
        phis.append(register_rigid(frames[0], frames[k], chained, search=False, **kw))
    return phis


def _compose_rigid(a: RigidMotion, b: RigidMotion) -> RigidMotion:
    """``a o b``."""
    R = a.matrix @ b.matrix
    v = a.matrix @ np.asarray(b.v) + np.asarray(a.v)
    return RigidMotion(np.arctan2(R[1, 0], R[0, 0]), (v[0], v[1]))


def gauge_fix(params: JudParams) -> JudParams:
    """Move every frame's mean shift into its rigid translation (data term unchanged)."""
    p = params.copy()
    for k in range(len(p.rigid)):
        delta = p.shifts[k].reshape(-1, 2).mean(axis=0)
        th = p.rigid[k, 0]
        c, s = np.cos(th), np.sin(th)
        p.shifts[k] -= delta
        p.rigid[k, 1] += c * delta[0] - s * delta[1]
        p.rigid[k, 2] += s * delta[0] + c * delta[1]
    return p


def _jud_partial(frames, partial, trace, reports, config) -> ReconstructionResult:
    """What a failed JUD run had computed, as an unconverged result."""
    K, N, M = frames.shape
    p = partial.get("params")
    if p is not None:
        spline = SplineImage(p.coeffs)
        return ReconstructionResult("jud", spline.render(M, N), spline,
                                    rigid=[RigidMotion(r[0], (r[1], r[2])) for r in p.rigid],
                                    shifts=[ScanlineShiftField(s) for s in p.shifts], loss_trace=list(trace),
                                    reports=dict(reports), converged=False, config=config)
    image = PixelImage(frames.mean(axis=0))
    return ReconstructionResult("jud", image, None, rigid=partial.get("rigid"), loss_trace=list(trace),
                                reports=dict(reports), converged=False, config=config)


def jud_reconstruct(series, config: Optional[LossConfig] = None, rigid_init: Optional[list] = None,
                    **overrides) -> ReconstructionResult:
    """Joint denoising and distortion correction with a cubic spline image model.

    Stages: (1) rigid alignment of all frames to frame 1; (2) BFGS fit of the
    spline to the mean of the rigidly aligned frames; (3) trust region over
    spline and rigid motions; (4) rigid fixed, trust region over spline and
    per-line shifts; (5) trust region over spline and per-pixel shifts.
    """
    config = _config(config, overrides)
    if isinstance(series, ImageSeries):
        frames = series.stack()
        Lam, dt, dT = config.times(series)
    else:
        frames = np.asarray(series, float)
        Lam, dt, dT = config.times(None)
    K, N, M = frames.shape
    n = config.n_spline
    prob = JudProblem(frames, n, Lam, dt, dT, config.nu_hor, config.nu_vert, config.first_line_inline,
                      config.shift_units)
    reports, trace = {}, []
    partial = {}
    it_rigid, it_line, it_pixel = config.stage_iter

    try:
        phis = rigid_init if rigid_init is not None else rigid_initialization(frames, config)
        motions = [rigid_inverse(phi) for phi in phis]
        partial["rigid"] = motions
    except Exception as exc:
        raise ReconstructionError(f"stage 1 (rigid alignment) failed: {exc}",
                                  _jud_partial(frames, partial, trace, reports, config)) from exc

    try:
        X, Y = pixel_coordinates(M, N)
        aligned = []
        for g, phi in zip(frames, phis):
            qx, qy = phi(X, Y)
            aligned.append(sample_bilinear(g, qx, qy))
        target = np.mean(aligned, axis=0)
        spline = fit_spline_to_image(np.maximum(target, 0.0), n)
        reports["spline_fit"] = None
    except Exception as exc:
        raise ReconstructionError(f"stage 2 (spline fit) failed: {exc}",
                                  _jud_partial(frames, partial, trace, reports, config)) from exc

    params = JudParams(np.array(spline.coeffs), _rigid_to_array(motions), np.zeros((K, N, M, 2)))
    trace.append(prob.evaluate(params, want_grad=False)[0]["total"])
    stages = [("rigid", ("coeffs", "rigid"), False, it_rigid),
              ("lines", ("coeffs", "shifts"), True, it_line),
              ("pixels", ("coeffs", "shifts"), False, it_pixel)]
    converged = True
    for idx, (name, blocks, per_line, iters) in enumerate(stages, start=3):
        try:
            params, rep = _run_stage(prob, params, blocks, per_line, iters, name, reports, trace)
        except Exception as exc:
            partial["params"] = params
            raise ReconstructionError(f"stage {idx} ({name}) failed: {exc}",
                                      _jud_partial(frames, partial, trace, reports, config)) from exc
        converged = converged and rep.converged
        partial["params"] = params

    fixed = gauge_fix(params)
    spline = SplineImage(fixed.coeffs)
    motions = [RigidMotion(r[0], (r[1], r[2])) for r in fixed.rigid]
    shifts = [ScanlineShiftField(s) for s in fixed.shifts]
    parts = prob.evaluate(fixed, want_grad=False)[0]
    return ReconstructionResult("jud", spline.render(M, N), spline, rigid=motions, shifts=shifts,
                                loss_trace=trace, reports=reports, converged=converged,
                                config=config, extras={"parts": parts, "params": fixed})


METHODS = {"nrr": nrr_reconstruct, "nrrplus": nrr_plus_reconstruct, "jud": jud_reconstruct}


def reconstruct(series, method: str, config: Optional[LossConfig] = None) -> ReconstructionResult:
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    return fn(series, config)
