"""Fourier-Bessel spatial bases and basis/coefficient kernel composition."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .numerics import ShapeError, Tensor, _node

__all__ = ["BasisVolume", "fb_modes", "generate_fb_bases", "compose_kernel"]


@dataclass(frozen=True)
class BasisVolume:
    """``k x k x r`` stack of spatial patterns shared by every decomposed kernel."""

    bases: np.ndarray

    @property
    def k(self) -> int:
        return self.bases.shape[0]

    @property
    def r(self) -> int:
        return self.bases.shape[2]


@lru_cache(maxsize=None)
def _mode_table(count: int) -> tuple[tuple[int, int, float, str], ...]:
    # orders 0..count+1 with count+1 zeros each cover the first count modes
    roots = []
    for m in range(count + 2):
        for q, root in enumerate(special.jn_zeros(m, count + 1), start=1):
            roots.append((float(root), m, q))
    roots.sort()
    modes: list[tuple[int, int, float, str]] = []
    for root, m, q in roots:
        modes.append((m, q, root, "cos"))
        if m > 0:
            modes.append((m, q, root, "sin"))
        if len(modes) >= count:
            break
    return tuple(modes[:count])


def fb_modes(count: int) -> list[tuple[int, int, float, str]]:
    """The first ``count`` disk modes as ``(order, zero_index, root, part)``.

    Modes are sorted by the Bessel root ``j_{m,q}``; each order ``m > 0``
    contributes a cosine then a sine variant, order 0 only the cosine one.
    """
    return list(_mode_table(count))


def _grid(k: int) -> tuple[np.ndarray, np.ndarray]:
    # cell centres of the k x k kernel, scaled so the disk circumscribing the
    # kernel square has unit radius
    centers = np.arange(k) - (k - 1) / 2.0
    half_diag = (k / 2.0) * np.sqrt(2.0)
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    rho = np.minimum(np.hypot(xx, yy) / half_diag, 1.0)
    theta = np.arctan2(yy, xx)
    return rho, theta


def generate_fb_bases(k: int, r: int) -> BasisVolume:
    """Sample the first ``r`` usable Fourier-Bessel modes on a ``k x k`` grid.

    Each pattern ``J_m(j_{m,q} rho) * {cos, sin}(m theta)`` is scaled to unit
    Frobenius norm. Modes are taken in root order; a mode whose samples vanish
    or lie in the span of the modes already taken is skipped, so the ``r``
    patterns are always linearly independent. The result only depends on
    ``(k, r)``.
    """
    if k < 1:
        raise ValueError("kernel size must be positive")
    if not 1 <= r <= k * k:
        raise ValueError(f"basis count must lie in [1, {k * k}] for k={k}, got {r}")
    rho, theta = _grid(k)
    patterns: list[np.ndarray] = []
    ortho = np.zeros((k * k, 0))
    for m, _q, root, part in fb_modes(2 * k * k + 8):
        radial = special.jv(m, root * rho)
        angular = np.cos(m * theta) if part == "cos" else np.sin(m * theta)
        pat = radial * angular
        norm = np.linalg.norm(pat)
        if norm < 1e-12:
            continue
        flat = pat.ravel() / norm
        residual = flat - ortho @ (ortho.T @ flat)
        if np.linalg.norm(residual) < 1e-6:
            continue
        ortho = np.column_stack([ortho, residual / np.linalg.norm(residual)])
        patterns.append(pat / norm)
        if len(patterns) == r:
            return BasisVolume(np.stack(patterns, axis=-1))
    raise ValueError(f"only {len(patterns)} independent modes found on a {k}x{k} grid")


def compose_kernel(bases: Tensor, coeffs: Tensor) -> Tensor:
    """``kernel[a, b, i, o] = sum_rho bases[a, b, rho] * coeffs[rho, i, o]``.

    Differentiable in both operands, so the bases can be refined together
    with the coefficient volumes.
    """
    if bases.data.ndim != 3 or coeffs.data.ndim != 3:
        raise ShapeError(f"expected k x k x r bases and r x C_in x C_out coeffs, got {bases.shape}, {coeffs.shape}")
    k, k2, r = bases.shape
    if coeffs.shape[0] != r:
        raise ShapeError(f"coefficient volume has {coeffs.shape[0]} bases, basis volume {r}")
    _, cin, cout = coeffs.shape
    bmat = bases.data.reshape(k * k2, r)
    cmat = coeffs.data.reshape(r, cin * cout)
    out = (bmat @ cmat).reshape(k, k2, cin, cout)

    def backward(g):
        g2 = g.reshape(k * k2, cin * cout)
        gb = (g2 @ cmat.T).reshape(bases.shape) if bases.requires_grad else None
        gc = (bmat.T @ g2).reshape(coeffs.shape) if coeffs.requires_grad else None
        return (gb, gc)

    return _node(out, (bases, coeffs), backward)
