"""Data distances: Poisson negative log-likelihood and normalized cross-correlation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PixelImage, pixel_coordinates, sample_bilinear
from .deform import GridDeformation, interpolation_matrix


class DegenerateImageError(ValueError):
    """An image is constant on its domain, so its NCC is undefined."""


class EmptyOverlapError(ValueError):
    pass


def _arr(u) -> np.ndarray:
    return u.values if isinstance(u, PixelImage) else np.asarray(u, dtype=np.float64)


def poisson_floor(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return 1e-8 * (1.0 + (float(v.max()) if v.size else 0.0))


def poisson_nll(u, v, floor: float | None = None) -> np.ndarray:
    """Elementwise ``u - v log u`` with ``u`` floored at a small positive value.

    The ``log v!`` term of the likelihood is dropped.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("observed counts must be nonnegative")
    eps = poisson_floor(v) if floor is None else floor
    uf = np.maximum(u, eps)
    return uf - v * np.log(uf)


def poisson_nll_grad(u, v, floor: float | None = None) -> np.ndarray:
    """Derivative ``1 - v/u`` of :func:`poisson_nll`; zero where ``u`` is floored."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    eps = poisson_floor(v) if floor is None else floor
    return np.where(u > eps, 1.0 - v / np.maximum(u, eps), 0.0)


@dataclass(frozen=True)
class DomainStats:
    mean: float
    std: float
    count: int

    @classmethod
    def of(cls, u, mask=None) -> "DomainStats":
        u = _arr(u)
        vals = u if mask is None else u[mask]
        if vals.size == 0:
            raise EmptyOverlapError("empty domain")
        return cls(float(vals.mean()), float(vals.std()), int(vals.size))


def _ncc_parts(u, w, u_mask, w_mask, policy):
    if policy == "intersection":
        dom = u_mask & w_mask
        if not dom.any():
            raise EmptyOverlapError("images do not overlap")
        u_dom = w_dom = dom
        count = int(dom.sum())
    elif policy == "union":
        if not (u_mask & w_mask).any():
            raise EmptyOverlapError("images do not overlap")
        u_dom, w_dom = u_mask, w_mask
        count = int((u_mask | w_mask).sum())
    else:
        raise ValueError(f"unknown domain policy {policy!r}")
    su = DomainStats.of(u, u_dom)
    sw = DomainStats.of(w, w_dom)
    if su.std <= 1e-12 * max(1.0, abs(su.mean)) or sw.std <= 1e-12 * max(1.0, abs(sw.mean)):
        raise DegenerateImageError("constant image has no normalized cross-correlation")
    a = np.where(u_dom, (u - su.mean) / su.std, 0.0)
    b = np.where(w_dom, (w - sw.mean) / sw.std, 0.0)
    return a, b, w_dom, sw, count


def ncc_distance(u, v, domain_policy: str = "union", u_mask=None, v_mask=None) -> float:
    """Negative normalized cross-correlation of two rasters, in ``[-1, 1]``.

    Under the union policy each image is standardized over its own valid
    pixels and extended by its mean elsewhere; the sum runs over the union
    of the valid sets.  The intersection policy uses the common pixels only.
    """
    u, v = _arr(u), _arr(v)
    if u.shape != v.shape:
        raise ValueError("images must have the same shape")
    u_mask = np.ones(u.shape, bool) if u_mask is None else np.asarray(u_mask, bool)
    v_mask = np.ones(v.shape, bool) if v_mask is None else np.asarray(v_mask, bool)
    a, b, _, _, count = _ncc_parts(u, v, u_mask, v_mask, domain_policy)
    return -float(np.sum(a * b)) / count


def ncc_with_grad(u, w, u_mask=None, w_mask=None, domain_policy: str = "union"):
    """NCC distance and its derivative with respect to the pixel values of ``w``."""
    u, w = _arr(u), _arr(w)
    u_mask = np.ones(u.shape, bool) if u_mask is None else np.asarray(u_mask, bool)
    w_mask = np.ones(w.shape, bool) if w_mask is None else np.asarray(w_mask, bool)
    a, b, w_dom, sw, count = _ncc_parts(u, w, u_mask, w_mask, domain_policy)
    S = float(np.sum(a * b))
    a_bar = float(a[w_dom].mean())
    grad = -((a - a_bar) - (S / sw.count) * b) / (count * sw.std)
    return -S / count, np.where(w_dom, grad, 0.0)


def warp_image(v, phi: GridDeformation, with_grad: bool = False):
    """Pullback ``v o phi`` sampled at pixel centres, with the in-domain mask."""
    v = _arr(v)
    N, M = v.shape
    X, Y = pixel_coordinates(M, N)
    qx, qy = phi(X, Y)
    mask = (qx >= 0) & (qx <= 1) & (qy >= 0) & (qy <= 1)
    if with_grad:
        w, gx, gy = sample_bilinear(v, qx, qy, with_grad=True)
        return w, mask, gx, gy
    return sample_bilinear(v, qx, qy), mask


def ncc_gradient_wrt_second(u, v, phi: GridDeformation, domain_policy: str = "union"):
    """Value and node gradient of ``phi -> NCC(u, v o phi)``.

    The in-domain mask of the warped image is held fixed, so the gradient
    is exact wherever no pixel centre crosses the domain boundary.
    """
    u, v = _arr(u), _arr(v)
    N, M = v.shape
    w, mask, gx, gy = warp_image(v, phi, with_grad=True)
    val, dw = ncc_with_grad(u, w, None, mask, domain_policy)
    X, Y = pixel_coordinates(M, N)
    W = interpolation_matrix(phi.ny, phi.nx, X, Y)
    g = np.stack([W.T @ (dw * gx).ravel(), W.T @ (dw * gy).ravel()], axis=-1)
    return val, g.reshape(phi.disp.shape)
