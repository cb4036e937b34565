"""Smooth unconstrained minimization: BFGS with a strong-Wolfe line search and
a Steihaug-CG trust-region method, plus a finite-difference gradient checker."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class OptimizationError(RuntimeError):
    """Raised when an objective is not finite at the starting point."""


@dataclass
class SmoothObjective:
    """A value/gradient pair with an optional Hessian-vector product.

    ``value_grad(x)`` returns ``(f, g)``; ``hessp(x, v)`` returns H(x) v.
    """

    value_grad: Callable
    hessp: Optional[Callable] = None

    @classmethod
    def from_value_grad(cls, fn, hessp=None) -> "SmoothObjective":
        return cls(fn, hessp)

    @classmethod
    def from_pair(cls, value, grad, hessp=None) -> "SmoothObjective":
        return cls(lambda x: (value(x), grad(x)), hessp)

    def value(self, x) -> float:
        return self.value_grad(x)[0]

    def gradient(self, x) -> np.ndarray:
        return self.value_grad(x)[1]

    def __call__(self, x):
        f, g = self.value_grad(x)
        return float(f), np.asarray(g, dtype=np.float64).ravel()


@dataclass
class SolverReport:
    iterations: int = 0
    grad_norm: float = np.inf
    value: float = np.inf
    converged: bool = False
    message: str = ""
    nfev: int = 0
    history: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "value", "grad_norm", "step"])
            for row in self.history:
                w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])


def _start(obj, x0):
    x = np.array(x0, dtype=np.float64).ravel()
    f, g = obj(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationError("objective or gradient is not finite at the starting point")
    return x, f, g


# --- strong Wolfe line search -------------------------------------------------

def _cubic_min(a, fa, ga, b, fb, gb):
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2 * d2)
    return t if np.isfinite(t) else None


def line_search_wolfe(phi, f0, g0, alpha1=1.0, c1=1e-4, c2=0.9, max_iter=30, alpha_max=1e10):
    """Strong-Wolfe line search on ``phi(alpha) -> (f, dphi, g)``.

    Returns ``(alpha, f, g, nfev)``; ``alpha`` is None when no step was found.
    """
    nfev = 0
    a_prev, f_prev, d_prev = 0.0, f0, g0
    a = alpha1
    best = None
    # near a minimizer f changes by less than its rounding error; there the
    # approximate Wolfe condition judges decrease by the slope instead
    eps_f = 1e-14 * max(1.0, abs(f0))

    def decreased(t, ft, dt):
        if ft <= f0 + c1 * t * g0:
            return True
        return ft <= f0 + eps_f and dt <= (2 * c1 - 1) * g0

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi):
        nonlocal nfev
        for _ in range(max_iter):
            t = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            lo_b, hi_b = min(lo, hi), max(lo, hi)
            width = hi_b - lo_b
            if t is None or t < lo_b + 0.1 * width or t > hi_b - 0.1 * width:
                t = 0.5 * (lo + hi)
            ft, dt, gt = phi(t)
            nfev += 1
            if not np.isfinite(ft) or not decreased(t, ft, dt) or (ft >= f_lo and ft > f0 + eps_f):
                hi, f_hi, d_hi = t, ft if np.isfinite(ft) else np.inf, dt if np.isfinite(ft) else 0.0
                if not np.isfinite(ft):
                    d_hi = d_lo
            else:
                if abs(dt) <= -c2 * g0:
                    return t, ft, gt
                if dt * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = t, ft, dt
                nonlocal best
                best = (t, ft, gt)
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        return None

    for i in range(max_iter):
        fa, da, ga = phi(a)
        nfev += 1
        if not np.isfinite(fa):
            a = 0.5 * (a_prev + a) if i < max_iter - 1 else a
            if a - a_prev < 1e-300:
                break
            continue
        if not decreased(a, fa, da) or (i > 0 and fa >= f_prev and fa > f0 + eps_f):
            res = zoom(a_prev, f_prev, d_prev, a, fa, da)
            break
        if abs(da) <= -c2 * g0:
            return a, fa, ga, nfev
        if da >= 0:
            res = zoom(a, fa, da, a_prev, f_prev, d_prev)
            break
        best = (a, fa, ga)
        a_prev, f_prev, d_prev = a, fa, da
        a = min(2.0 * a, alpha_max)
    else:
        res = None
    if res is not None:
        return res[0], res[1], res[2], nfev
    if best is not None and best[1] <= f0 + eps_f:
        return best[0], best[1], best[2], nfev
    return None, f0, None, nfev


# --- BFGS -----------------------------------------------------------------

def _two_loop(g, S, Y, rho, gamma):
    q = g.copy()
    alphas = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        a = r * (s @ q)
        alphas.append(a)
        q -= a * y
    q *= gamma
    for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
        b = r * (y @ q)
        q += (a - b) * s
    return q


def bfgs_minimize(obj, x0, tol: float = 1e-8, max_iter: int = 500, memory: Optional[int] = None,
                  c1: float = 1e-4, c2: float = 0.9, callback=None, ftol: float = 0.0):
    """Quasi-Newton BFGS minimization with a strong-Wolfe line search.

    A dense inverse-Hessian approximation is kept for up to 2000 unknowns;
    larger problems (or an explicit ``memory``) use the limited-memory two-loop
    recursion.  Updates failing the curvature condition are skipped.

    Converged means ``||grad|| <= tol``, or, when ``ftol > 0``, an iteration
    lowering the value by at most ``ftol * max(1, |f|)``.
    """
    if not isinstance(obj, SmoothObjective):
        obj = SmoothObjective(obj)
    x, f, g = _start(obj, x0)
    n = x.size
    if memory is None and n > 2000:
        memory = 20
    report = SolverReport(nfev=1)
    gnorm = float(np.linalg.norm(g))
    report.history.append((0, f, gnorm, 0.0))
    H = None
    S, Y, rho = [], [], []
    gamma = 1.0
    it = 0
    while gnorm > tol and it < max_iter:
        if memory:
            p = -_two_loop(g, S, Y, rho, gamma) if S else -g
        else:
            p = -(H @ g) if H is not None else -g
        dphi0 = float(p @ g)
        if dphi0 >= 0:
            # lost descent; restart from steepest descent
            S, Y, rho, H = [], [], [], None
            p = -g
            dphi0 = -gnorm * gnorm
        alpha1 = 1.0 if (S or H is not None) else min(1.0, 1.0 / gnorm)

        def phi(a, x=x, p=p):
            fa, ga = obj(x + a * p)
            return fa, float(ga @ p) if np.isfinite(fa) else np.nan, ga

        alpha, f_new, g_new, nfev = line_search_wolfe(phi, f, dphi0, alpha1, c1, c2)
        report.nfev += nfev
        if alpha is None:
            report.message = "line search failed"
            break
        s = alpha * p
        x = x + s
        y = g_new - g
        sy = float(s @ y)
        it += 1
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if memory:
                S.append(s)
                Y.append(y)
                rho.append(1.0 / sy)
                if len(S) > memory:
                    S.pop(0), Y.pop(0), rho.pop(0)
                gamma = sy / float(y @ y)
            else:
                if H is None:
                    H = np.eye(n) * (sy / float(y @ y))
                r = 1.0 / sy
                Hy = H @ y
                H = H + (r * r * (sy + y @ Hy)) * np.outer(s, s) - r * (np.outer(Hy, s) + np.outer(s, Hy))
        stalled = f - f_new <= ftol * max(1.0, abs(f))
        f, g = f_new, g_new
        gnorm = float(np.linalg.norm(g))
        report.history.append((it, f, gnorm, alpha))
        if callback is not None:
            callback(x, f, g)
        if abs(float(s @ s)) == 0.0:
            report.message = "zero step"
            break
        if ftol > 0 and stalled:
            report.message = "converged (relative reduction)"
            break
    report.iterations = it
    report.value = f
    report.grad_norm = gnorm
    report.converged = gnorm <= tol or report.message.startswith("converged")
    if gnorm <= tol:
        report.message = "converged"
    elif not report.message:
        report.message = "iteration limit reached"
    return x, report


# --- trust region ---------------------------------------------------------

class _DenseBFGS:
    def __init__(self, n):
        self.B = None
        self.n = n

    def matvec(self, v):
        return v.copy() if self.B is None else self.B @ v

    def update(self, s, y):
        if self.B is None:
            self.B = np.eye(self.n) * (float(y @ y) / max(float(s @ y), 1e-300)) \
                if s @ y > 0 else np.eye(self.n)
        Bs = self.B @ s
        y = _damped(s, y, Bs)
        if y is None:
            return
        self.B = self.B - np.outer(Bs, Bs) / float(s @ Bs) + np.outer(y, y) / float(s @ y)


class _LimitedBFGS:
    """Compact limited-memory BFGS matrix ``B = g I - W M^-1 W^T``."""

    def __init__(self, memory):
        self.memory = memory
        self.S, self.Y = [], []
        self.gamma = 1.0
        self._W = None
        self._Minv = None

    def matvec(self, v):
        if not self.S:
            return self.gamma * v
        return self.gamma * v - self._W @ (self._Minv @ (self._W.T @ v))

    def _rebuild(self):
        S = np.stack(self.S, axis=1)
        Y = np.stack(self.Y, axis=1)
        SY = S.T @ Y
        L = np.tril(SY, -1)
        D = np.diag(np.diag(SY))
        M = np.block([[self.gamma * (S.T @ S), L], [L.T, -D]])
        self._W = np.hstack([self.gamma * S, Y])
        self._Minv = np.linalg.inv(M)

    def update(self, s, y):
        Bs = self.matvec(s)
        y = _damped(s, y, Bs)
        if y is None:
            return
        self.S.append(s)
        self.Y.append(y)
        if len(self.S) > self.memory:
            self.S.pop(0)
            self.Y.pop(0)
        self.gamma = float(y @ y) / float(s @ y)
        try:
            self._rebuild()
        except np.linalg.LinAlgError:
            self.S, self.Y = [], []


def _damped(s, y, Bs):
    """Powell-damped secant vector, or None when the update is degenerate."""
    sBs = float(s @ Bs)
    sy = float(s @ y)
    if not np.isfinite(sBs) or sBs <= 0:
        return None
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1 - theta) * Bs
    if float(s @ y) <= 1e-300:
        return None
    return y


def steihaug_cg(g, hv, radius, tol, max_iter):
    """Approximately minimize ``g.p + p.B p / 2`` subject to ``||p|| <= radius``."""
    p = np.zeros_like(g)
    r = g.copy()
    d = -r
    rr = float(r @ r)
    if np.sqrt(rr) <= tol:
        return p, False
    for _ in range(max_iter):
        Bd = hv(d)
        dBd = float(d @ Bd)
        if dBd <= 0:
            return p + _to_boundary(p, d, radius) * d, True
        alpha = rr / dBd
        p_new = p + alpha * d
        if np.linalg.norm(p_new) >= radius:
            return p + _to_boundary(p, d, radius) * d, True
        p = p_new
        r = r + alpha * Bd
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= tol:
            return p, False
        d = -r + (rr_new / rr) * d
        rr = rr_new
    return p, False


def _to_boundary(p, d, radius):
    a = float(d @ d)
    b = 2 * float(p @ d)
    c = float(p @ p) - radius * radius
    return (-b + np.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)


def trust_region_minimize(obj, x0, tol: float = 1e-8, max_iter: int = 500, radius0: float = 1.0,
                          memory: Optional[int] = None, max_radius: float = 1e8,
                          eta: float = 0.1, cg_max_iter: Optional[int] = None, callback=None,
                          ftol: float = 0.0):
    """Trust-region minimization with Steihaug-CG subproblems.

    The model Hessian is ``obj.hessp`` when supplied, otherwise a Powell-damped
    BFGS matrix (dense up to 2000 unknowns, compact limited-memory beyond).
    Steps with ratio above ``eta`` are accepted; the radius shrinks below
    ratio 0.25 and doubles above 0.75 when the step hit the boundary.

    Converged means ``||grad|| <= tol``, or, when ``ftol > 0``, an accepted
    interior step lowering the value by at most ``ftol * max(1, |f|)``.
    Once predicted reductions fall below the rounding level of ``f`` the
    ratio uses the mean directional derivative along the step instead.
    """
    if not isinstance(obj, SmoothObjective):
        obj = SmoothObjective(obj)
    x, f, g = _start(obj, x0)
    n = x.size
    model = None
    if obj.hessp is None:
        if memory is None and n > 2000:
            memory = 20
        model = _LimitedBFGS(memory) if memory else _DenseBFGS(n)
    if cg_max_iter is None:
        cg_max_iter = max(2 * n, 10) if n < 500 else 250
    radius = float(radius0)
    report = SolverReport(nfev=1)
    gnorm = float(np.linalg.norm(g))
    report.history.append((0, f, gnorm, radius))
    it = 0
    while gnorm > tol and it < max_iter:
        it += 1
        if model is None:
            hv = lambda v, x=x: np.asarray(obj.hessp(x, v), float).ravel()  # noqa: E731
        else:
            hv = model.matvec
        cg_tol = min(0.5, np.sqrt(gnorm)) * gnorm
        p, hit = steihaug_cg(g, hv, radius, cg_tol, cg_max_iter)
        pred = -(float(g @ p) + 0.5 * float(p @ hv(p)))
        f_new, g_new = obj(x + p)
        report.nfev += 1
        pnorm = float(np.linalg.norm(p))
        if not np.isfinite(f_new):
            radius = 0.25 * pnorm
            report.history.append((it, f, gnorm, radius))
            continue
        actual = f - f_new
        if abs(pred) <= 1e-12 * max(1.0, abs(f)):
            # value differences are rounding noise here; the mean slope is exact for quadratics
            actual = -0.5 * float((g + g_new) @ p)
        rho = actual / pred if pred > 0 else (1.0 if actual > 0 else -1.0)
        if model is not None:
            model.update(p, g_new - g)
        if rho < 0.25:
            radius = 0.25 * pnorm
        elif rho > 0.75 and hit:
            radius = min(2.0 * radius, max_radius)
        stalled = False
        if rho > eta and actual > 0:
            stalled = not hit and actual <= ftol * max(1.0, abs(f))
            x = x + p
            f, g = f_new, g_new
            gnorm = float(np.linalg.norm(g))
            if callback is not None:
                callback(x, f, g)
        report.history.append((it, f, gnorm, radius))
        if ftol > 0 and stalled:
            report.message = "converged (relative reduction)"
            break
        if radius < 1e-15 * (1.0 + np.linalg.norm(x)):
            report.message = "trust region collapsed"
            break
    report.iterations = it
    report.value = f
    report.grad_norm = gnorm
    report.converged = gnorm <= tol or report.message.startswith("converged")
    if gnorm <= tol:
        report.message = "converged"
    elif not report.message:
        report.message = "iteration limit reached"
    return x, report


# --- gradient checking ------------------------------------------------------

def gradient_check(obj, x, h: float = 1e-6, indices=None) -> float:
    """Worst deviation of central differences from the analytic gradient.

    The error is measured relative to the gradient's infinity norm (or 1 when
    the gradient vanishes) so components near zero do not inflate it.
    ``indices`` restricts the check to a subset of coordinates.
    """
    if not isinstance(obj, SmoothObjective):
        obj = SmoothObjective(obj)
    x = np.array(x, dtype=np.float64).ravel()
    _, g = obj(x)
    idx = np.arange(x.size) if indices is None else np.asarray(indices)
    fd = np.empty(idx.size)
    for n, i in enumerate(idx):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fd[n] = (obj(xp)[0] - obj(xm)[0]) / (2 * h)
    scale = max(float(np.max(np.abs(g[idx]))), float(np.max(np.abs(fd))))
    scale = scale if scale > 0 else 1.0
    return float(np.max(np.abs(fd - g[idx]))) / scale
