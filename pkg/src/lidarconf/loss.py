"""Negative log-likelihood losses for regressing depth uncertainty.

Every loss takes the LiDAR depth ``d``, the proxy label ``d_star`` and the
predicted scale ``sigma >= 1`` and works elementwise on arrays. The
``*_star`` variants shift the residual by one so that the unconstrained
minimizer ``sigma = |d - d_star| + 1`` always lies in the feasible domain.
The Gaussian forms drop the constant ``ln sqrt(2 pi)``; the Laplacian forms
keep ``ln 2``.
"""
from __future__ import annotations

from typing import Literal

import numpy as np

LossKind = Literal["gaussian", "gaussian_star", "laplacian", "laplacian_star"]
LOSS_KINDS: tuple[str, ...] = ("gaussian", "gaussian_star", "laplacian", "laplacian_star")


def normalize_kind(kind: str) -> str:
    """Accept ``gaussian-star`` / ``gaussian_star`` spellings."""
    k = kind.replace("-", "_").lower()
    if k not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return k


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 1.0) or np.any(np.isnan(sigma)):
        raise ValueError("sigma must be >= 1")
    return sigma


def _residual(d, d_star, shifted: bool):
    r = np.abs(np.asarray(d, dtype=np.float64) - np.asarray(d_star, dtype=np.float64))
    return r + 1.0 if shifted else r


def loss_gaussian(d, d_star, sigma):
    sigma = _check_sigma(sigma)
    r = _residual(d, d_star, False)
    return np.log(sigma) + r * r / (2.0 * sigma * sigma)


def loss_gaussian_star(d, d_star, sigma):
    sigma = _check_sigma(sigma)
    r = _residual(d, d_star, True)
    return np.log(sigma) + r * r / (2.0 * sigma * sigma)


def loss_laplacian(d, d_star, sigma):
    sigma = _check_sigma(sigma)
    return np.log(2.0 * sigma) + _residual(d, d_star, False) / sigma


def loss_laplacian_star(d, d_star, sigma):
    sigma = _check_sigma(sigma)
    return np.log(2.0 * sigma) + _residual(d, d_star, True) / sigma


_LOSSES = {
    "gaussian": loss_gaussian,
    "gaussian_star": loss_gaussian_star,
    "laplacian": loss_laplacian,
    "laplacian_star": loss_laplacian_star,
}


def loss_value(kind: str, d, d_star, sigma):
    return _LOSSES[normalize_kind(kind)](d, d_star, sigma)


def loss_grad_sigma(kind: str, d, d_star, sigma):
    """Closed-form derivative of the loss with respect to ``sigma``."""
    kind = normalize_kind(kind)
    sigma = _check_sigma(sigma)
    r = _residual(d, d_star, kind.endswith("_star"))
    if kind.startswith("gaussian"):
        return 1.0 / sigma - r * r / sigma**3
    return 1.0 / sigma - r / (sigma * sigma)


def argmin_sigma(kind: str, d, d_star):
    """Minimizer over ``sigma >= 1``: ``max(1, |d - d*|)``, or ``|d - d*| + 1`` when starred."""
    kind = normalize_kind(kind)
    r = _residual(d, d_star, kind.endswith("_star"))
    return np.maximum(r, 1.0)


def batch_loss(kind: str, depth, proxy, sigma) -> float | None:
    """Mean per-pixel loss over valid pixels, or ``None`` when there are none.

    ``proxy`` must be valid exactly where ``depth`` is. Pixels are reduced in
    raster order.
    """
    depth = np.asarray(depth, dtype=np.float64)
    proxy = np.asarray(proxy, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if not (depth.shape == proxy.shape == sigma.shape):
        raise ValueError("raster size mismatch between depth, proxy and sigma")
    valid = depth > 0
    if not np.array_equal(valid, proxy > 0):
        raise ValueError("proxy validity mask does not match depth validity mask")
    if not valid.any():
        return None
    per_px = loss_value(kind, depth[valid], proxy[valid], sigma[valid])
    return float(per_px.sum() / per_px.size)
