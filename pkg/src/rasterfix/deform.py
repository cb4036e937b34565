"""Deformation models and their regularizers.

Three representations are used:

* ``GridDeformation`` -- piecewise bilinear maps of the unit square given by
  node displacements on a regular control grid (non-rigid registration).
* ``RigidMotion`` -- rotation about the domain origin plus a translation.
* ``ScanlineShiftField`` -- one 2D shift per pixel, optionally forced to be
  constant along every scan line.

All positions and displacements are in domain units (the unit square),
except where a function says otherwise.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .core import pixel_coordinates, save_stack, load_stack


# --- piecewise bilinear grids -----------------------------------------------

def _hat_weights(t: np.ndarray, cells: int):
    """Cell index and local coordinate of points ``t`` for a uniform 1D grid."""
    u = np.clip(t, 0.0, 1.0) * cells
    c = np.minimum(np.floor(u).astype(np.intp), cells - 1)
    return c, u - c


@functools.lru_cache(maxsize=64)
def _interp_matrix_cached(ny: int, nx: int, key: bytes, shape: tuple) -> sp.csr_matrix:
    pts = np.frombuffer(key, dtype=np.float64).reshape(shape)
    return _build_interp(ny, nx, pts[0], pts[1])


def _build_interp(ny: int, nx: int, px: np.ndarray, py: np.ndarray) -> sp.csr_matrix:
    cx, sx = _hat_weights(px, nx)
    cy, sy = _hat_weights(py, ny)
    n = px.size
    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([cy * (nx + 1) + cx, cy * (nx + 1) + cx + 1,
                     (cy + 1) * (nx + 1) + cx, (cy + 1) * (nx + 1) + cx + 1], axis=1).ravel()
    vals = np.stack([(1 - sx) * (1 - sy), sx * (1 - sy), (1 - sx) * sy, sx * sy], axis=1).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, (ny + 1) * (nx + 1)))


def interpolation_matrix(ny: int, nx: int, px: np.ndarray, py: np.ndarray) -> sp.csr_matrix:
    """Sparse map from node values to bilinearly interpolated point values."""
    px = np.ascontiguousarray(np.ravel(px), dtype=np.float64)
    py = np.ascontiguousarray(np.ravel(py), dtype=np.float64)
    pts = np.stack([px, py])
    if pts.size <= 200_000:
        return _interp_matrix_cached(ny, nx, pts.tobytes(), pts.shape)
    return _build_interp(ny, nx, px, py)


@dataclass(frozen=True)
class GridDeformation:
    """phi(p) = p + d(p) with d bilinear on an ``(ny+1) x (nx+1)`` node grid.

    ``disp`` has shape ``(ny + 1, nx + 1, 2)``; ``disp[b, a]`` is the
    displacement of the node at ``(a / nx, b / ny)``.
    """

    disp: np.ndarray

    def __post_init__(self):
        d = np.array(self.disp, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 2 or d.shape[0] < 2 or d.shape[1] < 2:
            raise ValueError(f"bad node displacement shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("non-finite node displacement")
        d.setflags(write=False)
        object.__setattr__(self, "disp", d)

    @classmethod
    def identity(cls, ny: int, nx: int) -> "GridDeformation":
        return cls(np.zeros((ny + 1, nx + 1, 2)))

    @classmethod
    def for_image(cls, M: int, N: int, pixels_per_node: int = 8) -> "GridDeformation":
        return cls.identity(max(1, round(N / pixels_per_node)), max(1, round(M / pixels_per_node)))

    @classmethod
    def from_map(cls, fn: Callable, ny: int, nx: int) -> "GridDeformation":
        """Sample a map ``fn(px, py) -> (qx, qy)`` at the nodes (exact for affine maps)."""
        X, Y = cls.node_positions_for(ny, nx)
        qx, qy = fn(X, Y)
        return cls(np.stack([qx - X, qy - Y], axis=-1))

    @classmethod
    def from_vector(cls, vec: np.ndarray, ny: int, nx: int) -> "GridDeformation":
        return cls(np.asarray(vec, float).reshape(ny + 1, nx + 1, 2))

    @staticmethod
    def node_positions_for(ny: int, nx: int):
        return np.meshgrid(np.linspace(0.0, 1.0, nx + 1), np.linspace(0.0, 1.0, ny + 1))

    @property
    def ny(self) -> int:
        return self.disp.shape[0] - 1

    @property
    def nx(self) -> int:
        return self.disp.shape[1] - 1

    def node_positions(self):
        X, Y = self.node_positions_for(self.ny, self.nx)
        return X + self.disp[..., 0], Y + self.disp[..., 1]

    def to_vector(self) -> np.ndarray:
        return self.disp.ravel().copy()

    def __call__(self, px, py):
        px = np.asarray(px, float)
        py = np.asarray(py, float)
        W = interpolation_matrix(self.ny, self.nx, px, py)
        d = W @ self.disp.reshape(-1, 2)
        return px + d[:, 0].reshape(px.shape), py + d[:, 1].reshape(py.shape)

    def jacobian_at(self, px, py):
        """Jacobian entries ``(dqx/dx, dqx/dy, dqy/dx, dqy/dy)`` at points."""
        cx, sx = _hat_weights(np.asarray(px, float), self.nx)
        cy, sy = _hat_weights(np.asarray(py, float), self.ny)
        d = self.disp
        d00 = d[cy, cx]
        d10 = d[cy, cx + 1]
        d01 = d[cy + 1, cx]
        d11 = d[cy + 1, cx + 1]
        ddx = ((1 - sy)[..., None] * (d10 - d00) + sy[..., None] * (d11 - d01)) * self.nx
        ddy = ((1 - sx)[..., None] * (d01 - d00) + sx[..., None] * (d11 - d10)) * self.ny
        return 1 + ddx[..., 0], ddy[..., 0], ddx[..., 1], 1 + ddy[..., 1]

    def outside_nodes(self) -> np.ndarray:
        """Mask of nodes whose deformed position has left the unit square."""
        qx, qy = self.node_positions()
        return (qx < 0) | (qx > 1) | (qy < 0) | (qy > 1)

    def refine_to(self, ny: int, nx: int) -> "GridDeformation":
        """Prolongate onto a finer grid by interpolating node displacements."""
        X, Y = self.node_positions_for(ny, nx)
        W = interpolation_matrix(self.ny, self.nx, X, Y)
        return GridDeformation((W @ self.disp.reshape(-1, 2)).reshape(ny + 1, nx + 1, 2))

    def displacement_px(self, M: int, N: int) -> np.ndarray:
        return self.disp * np.array([M, N], float)


def compose_grid(phi_a: GridDeformation, phi_b: GridDeformation) -> GridDeformation:
    """Node-resampled composition ``p -> phi_a(phi_b(p))`` on ``phi_b``'s grid."""
    qx, qy = phi_b.node_positions()
    rx, ry = phi_a(qx, qy)
    X, Y = phi_b.node_positions_for(phi_b.ny, phi_b.nx)
    return GridDeformation(np.stack([rx - X, ry - Y], axis=-1))


# --- (J - I) Frobenius regularizer ------------------------------------------

_GAUSS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


@functools.lru_cache(maxsize=32)
def _jacobian_operators(ny: int, nx: int):
    """Sparse maps from node values to d/dx and d/dy at 2x2 Gauss points per cell."""
    hx, hy = 1.0 / nx, 1.0 / ny
    rows_x, cols_x, vals_x = [], [], []
    rows_y, cols_y, vals_y = [], [], []
    q = 0
    node = lambda a, b: b * (nx + 1) + a  # noqa: E731
    for b in range(ny):
        for a in range(nx):
            n00, n10, n01, n11 = node(a, b), node(a + 1, b), node(a, b + 1), node(a + 1, b + 1)
            for t in _GAUSS:
                for s in _GAUSS:
                    rows_x += [q] * 4
                    cols_x += [n00, n10, n01, n11]
                    vals_x += [-(1 - t) / hx, (1 - t) / hx, -t / hx, t / hx]
                    rows_y += [q] * 4
                    cols_y += [n00, n10, n01, n11]
                    vals_y += [-(1 - s) / hy, -s / hy, (1 - s) / hy, s / hy]
                    q += 1
    shape = (q, (ny + 1) * (nx + 1))
    Gx = sp.csr_matrix((vals_x, (rows_x, cols_x)), shape=shape)
    Gy = sp.csr_matrix((vals_y, (rows_y, cols_y)), shape=shape)
    return Gx, Gy, hx * hy / 4.0


def jacobian_regularizer(phi: GridDeformation):
    """Integral of ``||J(phi) - I||_F^2`` over the unit square and its node gradient.

    The integrand is quadratic on each cell, so 2x2 Gauss quadrature is exact.
    """
    Gx, Gy, w = _jacobian_operators(phi.ny, phi.nx)
    d = phi.disp.reshape(-1, 2)
    ax = Gx @ d
    ay = Gy @ d
    cost = w * float(np.sum(ax * ax) + np.sum(ay * ay))
    grad = 2.0 * w * (Gx.T @ ax + Gy.T @ ay)
    return cost, grad.reshape(phi.disp.shape)


def fold_penalty(phi: GridDeformation, weight: float):
    """``weight * sum max(0, -det J)^2`` over the Gauss points, with gradient."""
    Gx, Gy, _ = _jacobian_operators(phi.ny, phi.nx)
    d = phi.disp.reshape(-1, 2)
    ax = Gx @ d
    ay = Gy @ d
    det = (1 + ax[:, 0]) * (1 + ay[:, 1]) - ay[:, 0] * ax[:, 1]
    neg = np.minimum(det, 0.0)
    cost = weight * float(np.sum(neg * neg))
    g_det = 2.0 * weight * neg
    g_ax = np.stack([g_det * (1 + ay[:, 1]), -g_det * ay[:, 0]], axis=1)
    g_ay = np.stack([-g_det * ax[:, 1], g_det * (1 + ax[:, 0])], axis=1)
    grad = Gx.T @ g_ax + Gy.T @ g_ay
    return cost, grad.reshape(phi.disp.shape)


# --- rigid motions ------------------------------------------------------------

@dataclass(frozen=True)
class RigidMotion:
    """``p -> R(theta) p + v`` with rotation about the domain origin."""

    theta: float = 0.0
    v: tuple = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "v", (float(self.v[0]), float(self.v[1])))

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def __call__(self, px, py):
        c, s = np.cos(self.theta), np.sin(self.theta)
        px = np.asarray(px, float)
        py = np.asarray(py, float)
        return c * px - s * py + self.v[0], s * px + c * py + self.v[1]

    @classmethod
    def about_center(cls, theta: float, t, center=(0.5, 0.5)) -> "RigidMotion":
        """Rotation by ``theta`` about ``center`` followed by translation ``t``."""
        c, s = np.cos(theta), np.sin(theta)
        cx, cy = center
        return cls(theta, (cx - (c * cx - s * cy) + t[0], cy - (s * cx + c * cy) + t[1]))


def rigid_inverse(rigid: RigidMotion) -> RigidMotion:
    R = rigid.matrix
    v = -R.T @ np.asarray(rigid.v)
    return RigidMotion(-rigid.theta, (v[0], v[1]))


# --- scanline shifts ----------------------------------------------------------

@dataclass(frozen=True)
class ScanlineShiftField:
    """Per-pixel shifts ``s[j, i] = (s_x, s_y)`` in domain units, shape ``(N, M, 2)``."""

    s: np.ndarray
    per_line: bool = False

    def __post_init__(self):
        s = np.array(self.s, dtype=np.float64)
        if s.ndim != 3 or s.shape[2] != 2:
            raise ValueError(f"shift field must have shape (N, M, 2), got {s.shape}")
        if self.per_line:
            s = np.broadcast_to(s[:, :1, :], s.shape).copy()
        s.setflags(write=False)
        object.__setattr__(self, "s", s)

    @classmethod
    def zeros(cls, M: int, N: int, per_line: bool = False) -> "ScanlineShiftField":
        return cls(np.zeros((N, M, 2)), per_line)

    @classmethod
    def from_lines(cls, line_shifts: np.ndarray, M: int) -> "ScanlineShiftField":
        line_shifts = np.asarray(line_shifts, float)
        return cls(np.repeat(line_shifts[:, None, :], M, axis=1), per_line=True)

    @property
    def shape(self):
        return self.s.shape[:2]

    def line_values(self) -> np.ndarray:
        return self.s[:, 0, :].copy()

    def in_pixels(self) -> np.ndarray:
        N, M = self.shape
        return self.s * np.array([M, N], float)


def _check_times(Lam, dt, dT):
    if not (Lam > 0 and dt > 0 and dT > 0):
        raise ValueError("Lambda, dwell time and line time must be positive")


def brownian_regularizer(s, Lam: float, dt: float, dT: float, first_line_inline: bool = True):
    """Brownian-motion prior on a shift field chained in raster-scan order.

    ``s`` is an ``(N, M, 2)`` array or a ``ScanlineShiftField``.  Differences
    of consecutive pixels in one line are weighted by ``1/dt``, the jump from
    the last pixel of a line to the first of the next by ``1/dT``, and the
    first pixel is anchored to zero with weight ``1/dt``.  With
    ``first_line_inline=False`` the in-line terms of the first line are
    dropped, matching the formula's literal index range.
    """
    _check_times(Lam, dt, dT)
    s = s.s if isinstance(s, ScanlineShiftField) else np.asarray(s, float)
    half = 0.5 * Lam
    grad = np.zeros_like(s)

    anchor = s[0, 0]
    cost = half * float(anchor @ anchor) / dt
    grad[0, 0] += Lam * anchor / dt

    dl = s[:, 1:] - s[:, :-1]
    wl = np.full(s.shape[0], 1.0 / dt)
    if not first_line_inline:
        wl[0] = 0.0
    cost += half * float(np.sum(wl[:, None, None] * dl * dl))
    gl = Lam * wl[:, None, None] * dl
    grad[:, 1:] += gl
    grad[:, :-1] -= gl

    dj = s[1:, 0] - s[:-1, -1]
    cost += half * float(np.sum(dj * dj)) / dT
    gj = Lam * dj / dT
    grad[1:, 0] += gj
    grad[:-1, -1] -= gj
    return cost, grad


def tikhonov_regularizer(s, nu_hor: float, nu_vert: float):
    """``1/2 sum(nu_hor s_x^2 + nu_vert s_y^2)`` and its gradient."""
    if not (nu_hor > 0 and nu_vert > 0):
        raise ValueError("nu_hor and nu_vert must be positive")
    s = s.s if isinstance(s, ScanlineShiftField) else np.asarray(s, float)
    nu = np.array([nu_hor, nu_vert])
    cost = 0.5 * float(np.sum(nu * s * s))
    return cost, nu * s


def apply_jud_deformation(rigid: RigidMotion, s, i=None, j=None):
    """Distorted sample positions ``R (x_ij + s_ij) + v``.

    With ``i``/``j`` omitted, positions for all pixels are returned as two
    ``(N, M)`` arrays.  Indices are 0-based.
    """
    arr = s.s if isinstance(s, ScanlineShiftField) else np.asarray(s, float)
    N, M = arr.shape[:2]
    X, Y = pixel_coordinates(M, N)
    px = X + arr[..., 0]
    py = Y + arr[..., 1]
    qx, qy = rigid(px, py)
    if i is None:
        return qx, qy
    return float(qx[j, i]), float(qy[j, i])


# --- bias correction ----------------------------------------------------------

def _psi_objective(phis: Sequence[GridDeformation], ny: int, nx: int):
    X, Y = GridDeformation.node_positions_for(ny, nx)

    def value_grad(vec):
        q = vec.reshape(ny + 1, nx + 1, 2)
        qx, qy = X + q[..., 0], Y + q[..., 1]
        val = 0.0
        g = np.zeros_like(q)
        for phi in phis:
            rx, ry = phi(qx, qy)
            ex, ey = rx - X, ry - Y
            j11, j12, j21, j22 = phi.jacobian_at(qx, qy)
            val += float(np.sum(ex * ex + ey * ey))
            g[..., 0] += 2 * (ex * j11 + ey * j21)
            g[..., 1] += 2 * (ex * j12 + ey * j22)
        return val, g.ravel()

    return value_grad


def psi_residual(phis: Sequence[GridDeformation], psi: GridDeformation) -> float:
    """Node-sum ``sum_k ||phi_k o psi - id||^2`` evaluated on ``psi``'s grid."""
    val, _ = _psi_objective(phis, psi.ny, psi.nx)(psi.to_vector())
    return val


class BiasCorrectionError(RuntimeError):
    pass


def bias_correction_psi(deformations: Sequence[GridDeformation], sweeps: int = 2,
                        tol: float = 1e-12, max_iter: int = 200) -> GridDeformation:
    """Change of variables psi minimizing ``sum_k ||phi_k o psi - id||^2``.

    Two Gauss-Newton sweeps (phi_k linearized at psi's current nodes) give
    the starting point for a BFGS polish of the exact node-sum objective.
    """
    from .optim import SmoothObjective, bfgs_minimize

    phis = list(deformations)
    if not phis:
        raise ValueError("need at least one deformation")
    ny, nx = phis[0].ny, phis[0].nx
    if any((p.ny, p.nx) != (ny, nx) for p in phis):
        raise ValueError("deformations must share one control grid")
    X, Y = GridDeformation.node_positions_for(ny, nx)
    fun = _psi_objective(phis, ny, nx)
    start = np.zeros((ny + 1, nx + 1, 2))
    f_id = fun(start.ravel())[0]

    q = start.copy()
    for _ in range(sweeps):
        qx, qy = X + q[..., 0], Y + q[..., 1]
        A = np.zeros((ny + 1, nx + 1, 2, 2))
        b = np.zeros((ny + 1, nx + 1, 2))
        for phi in phis:
            rx, ry = phi(qx, qy)
            J = np.stack(phi.jacobian_at(qx, qy), axis=-1).reshape(ny + 1, nx + 1, 2, 2)
            r = np.stack([rx - X, ry - Y], axis=-1)
            A += np.einsum("...ki,...kj->...ij", J, J)
            b += np.einsum("...ki,...k->...i", J, r)
        q = q - np.linalg.solve(A, b[..., None])[..., 0]
    if fun(q.ravel())[0] > f_id:
        q = start

    scale = max(1.0, f_id)
    x, report = bfgs_minimize(SmoothObjective.from_value_grad(fun), q.ravel(),
                              tol=tol * scale + 1e-14, max_iter=max_iter)
    val = fun(x)[0]
    if not np.isfinite(val) or val > f_id + 1e-15:
        raise BiasCorrectionError(f"psi solve failed: residual {val:.3e} vs {f_id:.3e} at identity")
    return GridDeformation.from_vector(x, ny, nx)


# --- CSV / container exports -------------------------------------------------

def write_shift_csv(path, fields: Iterable[ScanlineShiftField]) -> None:
    """Rows ``k, i, j, s_x, s_y`` with 0-based indices and shifts in pixels."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "i", "j", "s_x", "s_y"])
        for k, f in enumerate(fields):
            px = f.in_pixels()
            N, M = f.shape
            for j in range(N):
                for i in range(M):
                    w.writerow([k, i, j, repr(float(px[j, i, 0])), repr(float(px[j, i, 1]))])


def read_shift_csv(path, M: int, N: int) -> list:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    K = int(data[:, 0].max()) + 1 if data.size else 0
    out = []
    for k in range(K):
        rows = data[data[:, 0] == k]
        s = np.zeros((N, M, 2))
        s[rows[:, 2].astype(int), rows[:, 1].astype(int)] = rows[:, 3:5] / np.array([M, N])
        out.append(ScanlineShiftField(s))
    return out


def write_rigid_csv(path, motions: Iterable[RigidMotion]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "theta", "v_x", "v_y"])
        for k, r in enumerate(motions):
            w.writerow([k, repr(r.theta), repr(r.v[0]), repr(r.v[1])])


def read_rigid_csv(path) -> list:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return [RigidMotion(row[1], (row[2], row[3])) for row in data]


def save_grid(phi: GridDeformation, path) -> None:
    """Store node displacements as a 2-channel RSIS container."""
    save_stack(np.moveaxis(phi.disp, -1, 0), path)


def load_grid(path) -> GridDeformation:
    stack = load_stack(path)
    if stack.shape[0] != 2:
        raise ValueError("grid deformation file must hold 2 channels")
    return GridDeformation(np.moveaxis(stack, 0, -1))
