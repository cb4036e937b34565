"""Finite-difference checks of every analytic gradient on small random instances.

Each registered check takes a ``numpy.random.Generator`` and returns the
relative deviation reported by :func:`rasterfix.optim.gradient_check`.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from .core import pixel_coordinates
from .deform import (GridDeformation, _psi_objective, brownian_regularizer, fold_penalty,
                     jacobian_regularizer, tikhonov_regularizer)
from .fidelity import ncc_gradient_wrt_second, ncc_with_grad, poisson_nll, poisson_nll_grad
from .imagemodel import BumpImage, SplineImage, SplineSampler, bump_eval, bump_grads, spline_grad_pos
from .optim import gradient_check

TOLERANCE = 1e-5
TARGETS = ("fidelity", "deform", "imagemodel", "jud")

_REGISTRY: Dict[str, List[Tuple[str, Callable]]] = {t: [] for t in TARGETS}


def register_check(target: str, name: str):
    """Decorator adding ``fn(rng) -> error`` to the checks of ``target``."""
    if target not in _REGISTRY:
        raise ValueError(f"unknown target {target!r}")

    def wrap(fn):
        _REGISTRY[target].append((name, fn))
        return fn

    return wrap


def unregister_check(target: str, name: str) -> None:
    _REGISTRY[target] = [(n, f) for n, f in _REGISTRY[target] if n != name]


def _smooth_image(rng, N, M, lo=10.0, hi=100.0):
    X, Y = pixel_coordinates(M, N)
    out = np.full((N, M), lo)
    for _ in range(3):
        c = rng.uniform(0.2, 0.8, 2)
        s = rng.uniform(0.15, 0.3)
        out += (hi - lo) / 3 * np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2) / (2 * s * s))
    return out


# --- fidelity -------------------------------------------------------------

@register_check("fidelity", "poisson_nll")
def _check_poisson(rng):
    v = rng.poisson(20.0, 30).astype(float)
    u0 = rng.uniform(1.0, 40.0, 30)
    return gradient_check(lambda u: (float(poisson_nll(u, v).sum()), poisson_nll_grad(u, v)), u0, h=1e-5)


@register_check("fidelity", "ncc_values")
def _check_ncc_values(rng):
    u = rng.uniform(0, 1, (6, 6))
    um = rng.uniform(size=(6, 6)) > 0.2
    wm = rng.uniform(size=(6, 6)) > 0.2
    um[0, 0] = wm[0, 0] = True
    policy = ("union", "intersection")[int(rng.integers(2))]

    def fn(w):
        return ncc_with_grad(u, w.reshape(6, 6), um, wm, policy)[0], \
            ncc_with_grad(u, w.reshape(6, 6), um, wm, policy)[1].ravel()

    return gradient_check(fn, rng.uniform(0, 1, 36))


@register_check("fidelity", "ncc_chain")
def _check_ncc_chain(rng):
    N = M = 12
    u = _smooth_image(rng, N, M)
    v = _smooth_image(rng, N, M)
    d0 = rng.normal(0, 0.01, (3, 3, 2))
    d0[0, :] = d0[-1, :] = d0[:, 0] = d0[:, -1] = 0.0
    policy = ("union", "intersection")[int(rng.integers(2))]

    def fn(vec):
        val, g = ncc_gradient_wrt_second(u, v, GridDeformation.from_vector(vec, 2, 2), policy)
        return val, g.ravel()

    return gradient_check(fn, d0.ravel(), h=1e-7)


# --- deform ---------------------------------------------------------------

@register_check("deform", "jacobian_regularizer")
def _check_jacobian(rng):
    ny, nx = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    d0 = rng.normal(0, 0.05, (ny + 1, nx + 1, 2))

    def fn(vec):
        c, g = jacobian_regularizer(GridDeformation.from_vector(vec, ny, nx))
        return c, g.ravel()

    return gradient_check(fn, d0.ravel())


@register_check("deform", "fold_penalty")
def _check_fold(rng):
    d0 = rng.normal(0, 0.4, (4, 4, 2))

    def fn(vec):
        c, g = fold_penalty(GridDeformation.from_vector(vec, 3, 3), 10.0)
        return c, g.ravel()

    return gradient_check(fn, d0.ravel(), h=1e-7)


@register_check("deform", "bias_correction")
def _check_psi(rng):
    # phi has kinks at thirds; psi's interior nodes at quarters stay clear of them
    phis = [GridDeformation(rng.normal(0, 0.03, (4, 4, 2))) for _ in range(3)]
    fn = _psi_objective(phis, 4, 4)
    q0 = np.zeros((5, 5, 2))
    q0[1:-1, 1:-1] = rng.normal(0, 0.01, (3, 3, 2))
    interior = np.zeros((5, 5, 2), bool)
    interior[1:-1, 1:-1] = True
    return gradient_check(fn, q0.ravel(), h=1e-7, indices=np.flatnonzero(interior))


@register_check("deform", "R1_brownian")
def _check_r1(rng):
    N, M = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    inline = bool(rng.integers(2))
    Lam, dt, dT = rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(2, 5)
    s0 = rng.normal(0, 1, (N, M, 2))

    def fn(vec):
        c, g = brownian_regularizer(vec.reshape(N, M, 2), Lam, dt, dT, inline)
        return c, g.ravel()

    return gradient_check(fn, s0.ravel(), h=1e-5)


@register_check("deform", "R2_tikhonov")
def _check_r2(rng):
    N, M = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    nu = rng.uniform(1, 80, 2)

    def fn(vec):
        c, g = tikhonov_regularizer(vec.reshape(N, M, 2), *nu)
        return c, g.ravel()

    return gradient_check(fn, rng.normal(0, 1, N * M * 2), h=1e-5)


@register_check("deform", "registration_loss")
def _check_grid_loss(rng):
    from .pipeline import _grid_loss

    u = _smooth_image(rng, 16, 16)
    v = _smooth_image(rng, 16, 16)
    d0 = rng.normal(0, 0.01, (3, 3, 2))
    fn = _grid_loss(u, v, 2, 2, 0.01, "union")
    return gradient_check(fn, d0.ravel(), h=1e-7)


@register_check("deform", "rigid_loss")
def _check_rigid_loss(rng):
    from .pipeline import _rigid_loss

    u = _smooth_image(rng, 16, 16)
    v = _smooth_image(rng, 16, 16)
    fn, _ = _rigid_loss(u, v, "union")
    return gradient_check(fn, rng.normal(0, 0.1, 3), h=1e-6)


# --- imagemodel -----------------------------------------------------------

@register_check("imagemodel", "spline_coeffs")
def _check_spline_coeffs(rng):
    n = int(rng.integers(4, 9))
    p = rng.uniform(0, 1, (2, 20))
    w = rng.normal(size=20)
    S = SplineSampler(n, p[0], p[1])

    def fn(c):
        return float(w @ S.values(c.reshape(n, n))), S.coeff_adjoint(w).ravel()

    return gradient_check(fn, rng.uniform(0, 10, n * n))


@register_check("imagemodel", "spline_position")
def _check_spline_pos(rng):
    n = int(rng.integers(4, 9))
    spline = SplineImage(rng.uniform(0, 10, (n, n)))
    p0 = rng.uniform(0.05, 0.95, 2)

    def fn(p):
        return float(spline(np.array([p[0]]), np.array([p[1]]))[0]), spline_grad_pos(spline, p)

    return gradient_check(fn, p0, h=1e-7)


@register_check("imagemodel", "bump_parameters")
def _check_bump(rng):
    L = int(rng.integers(1, 4))
    pts = rng.uniform(0, 1, (2, 15))
    w = rng.normal(size=15)

    def unpack(x):
        return BumpImage(x[:2 * L].reshape(L, 2), x[2 * L:3 * L], x[3 * L:4 * L], x[-1])

    def fn(x):
        b = unpack(x)
        g = bump_grads(b, *pts)
        grad = np.concatenate([np.einsum("p,plc->lc", w, g["centers"]).ravel(), w @ g["amplitudes"],
                               w @ g["widths"], [w @ g["offset"]]])
        return float(w @ bump_eval(b, *pts)), grad

    x0 = np.concatenate([rng.uniform(0.2, 0.8, 2 * L), rng.uniform(1, 5, L),
                         rng.uniform(0.1, 0.3, L), [rng.uniform(0, 1)]])
    return gradient_check(fn, x0, h=1e-7)


@register_check("imagemodel", "bump_position")
def _check_bump_pos(rng):
    b = BumpImage(rng.uniform(0.2, 0.8, (3, 2)), rng.uniform(1, 5, 3), rng.uniform(0.1, 0.3, 3), 1.0)

    def fn(p):
        return float(bump_eval(b, p[0], p[1])), bump_grads(b, p[0], p[1])["x"][0]

    return gradient_check(fn, rng.uniform(0, 1, 2), h=1e-7)


# --- JUD ------------------------------------------------------------------

@register_check("jud", "joint_objective")
def _check_jud(rng):
    from .pipeline import JudParams, JudProblem

    K, N, M, n = 2, 8, 8, 6
    frames = rng.poisson(_smooth_image(rng, N, M), (K, N, M)).astype(float)
    prob = JudProblem(frames, n, 1e-3, 1e-5, 1e-2, 25.9, 71.4, bool(rng.integers(2)))
    c0 = rng.uniform(20, 60, (n, n))
    r0 = np.column_stack([rng.normal(0, 0.02, K), rng.normal(0, 0.01, (K, 2))])
    s0 = rng.normal(0, 0.005, (K, N, M, 2))
    sizes = (c0.size, r0.size, s0.size)

    def unpack(x):
        a, b = sizes[0], sizes[0] + sizes[1]
        return JudParams(x[:a].reshape(n, n), x[a:b].reshape(K, 3), x[b:].reshape(K, N, M, 2))

    def fn(x):
        parts, g = prob.evaluate(unpack(x))
        return parts["objective"], np.concatenate([g.coeffs.ravel(), g.rigid.ravel(), g.shifts.ravel()])

    x0 = np.concatenate([c0.ravel(), r0.ravel(), s0.ravel()])
    # shifts enter through the spline only, so a separate step size suits them
    err_c = gradient_check(fn, x0, h=1e-6, indices=np.arange(sizes[0] + sizes[1]))
    err_s = gradient_check(fn, x0, h=1e-8, indices=sizes[0] + sizes[1] + rng.choice(sizes[2], 40, replace=False))
    return max(err_c, err_s)


def run_checks(target: str = "all", instances: int = 10, seed: int = 0) -> List[Tuple[str, str, float]]:
    """``(target, name, worst error)`` for each registered check over ``instances`` seeds."""
    if target != "all" and target not in _REGISTRY:
        raise ValueError(f"unknown target {target!r}")
    targets = TARGETS if target == "all" else (target,)
    out = []
    for t in targets:
        for name, fn in _REGISTRY[t]:
            worst = 0.0
            for i in range(instances):
                rng = np.random.default_rng([seed, i])
                err = float(fn(rng))
                worst = max(worst, err if np.isfinite(err) else np.inf)
            out.append((t, name, worst))
    return out
