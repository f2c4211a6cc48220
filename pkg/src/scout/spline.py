"""Per-dimension monotone rational-quadratic transforms with linear tails.

Each coordinate gets its own strictly monotone map on [-B, B] built from
``n_bins`` rational-quadratic segments (softmax-normalized widths and
heights, softplus-positive knot derivatives, boundary derivatives pinned
to 1 so the identity tails join smoothly). Raw parameters of all zeros
(and ``softplus_inverse(1)`` for the derivative block) give the exact
identity map.

The forward pass is written in autodiff ops so it can sit inside the
likelihood tape; the analytic inverse is numpy-only (used for sampling
and round-trip checks).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "N_BINS",
    "TAIL_BOUND",
    "MIN_BIN_FRACTION",
    "identity_raw_params",
    "split_raw",
    "merge_raw",
    "rq_forward",
    "rq_inverse",
]

N_BINS = 8
TAIL_BOUND = 5.0
MIN_BIN_FRACTION = 1e-3

_SOFTPLUS_INV_1 = float(np.log(np.expm1(1.0)))  # softplus(x) == 1


def identity_raw_params(d: int, n_bins: int = N_BINS) -> np.ndarray:
    """Raw (d, 3*n_bins - 1) parameter block for the identity transform."""
    raw = np.zeros((d, 3 * n_bins - 1))
    raw[:, 2 * n_bins :] = _SOFTPLUS_INV_1
    return raw


def split_raw(raw: np.ndarray, n_bins: int = N_BINS):
    """Split a raw block into (widths, heights, derivatives) pieces."""
    if raw.shape[-1] != 3 * n_bins - 1:
        raise ValueError(f"raw block must have {3 * n_bins - 1} columns")
    return raw[:, :n_bins], raw[:, n_bins : 2 * n_bins], raw[:, 2 * n_bins :]


def merge_raw(tw: np.ndarray, th: np.ndarray, td: np.ndarray) -> np.ndarray:
    return np.concatenate([tw, th, td], axis=1)


def _bin_geometry(tw: Tensor, th: Tensor, td: Tensor, n_bins: int, bound: float):
    """Tensors: bin widths/heights (d, K), their cumsums, knot derivatives (d, K+1)."""
    scale = 1.0 - MIN_BIN_FRACTION * n_bins
    widths = (ad.softmax(tw, axis=1) * scale + MIN_BIN_FRACTION) * (2.0 * bound)
    heights = (ad.softmax(th, axis=1) * scale + MIN_BIN_FRACTION) * (2.0 * bound)
    cw = ad.cumsum(widths, axis=1)
    ch = ad.cumsum(heights, axis=1)
    d = tw.value.shape[0]
    ones = ad.constant(np.ones((d, 1)))
    derivs = ad.concat([ones, ad.softplus(td), ones], axis=1)
    return widths, heights, cw, ch, derivs


def rq_forward(
    eps: Tensor,
    tw: Tensor,
    th: Tensor,
    td: Tensor,
    n_bins: int = N_BINS,
    bound: float = TAIL_BOUND,
) -> tuple[Tensor, Tensor]:
    """Transform residuals (B, d) -> (z, log|dz/de|), differentiable.

    Entries outside [-bound, bound] pass through the identity tails with
    zero log-derivative.
    """
    widths, heights, cw, ch, derivs = _bin_geometry(tw, th, td, n_bins, bound)

    eps_v = eps.value if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if eps_v.ndim != 2:
        raise ValueError("rq_forward expects a (batch, d) input")
    B, d = eps_v.shape
    inside = ((eps_v >= -bound) & (eps_v <= bound)).astype(np.float64)
    eps_clipped = np.clip(eps_v, -bound, bound)

    # constant bin index per entry: count internal left knots <= value
    left_internal = -bound + cw.value[:, : n_bins - 1]  # (d, K-1)
    bins = (eps_clipped[:, :, None] >= left_internal[None, :, :]).sum(axis=2)
    dim_idx = np.broadcast_to(np.arange(d), (B, d))
    idx = (dim_idx, bins)

    x_left = ad.gather(cw - widths, idx) - bound
    w_b = ad.gather(widths, idx)
    y_left = ad.gather(ch - heights, idx) - bound
    h_b = ad.gather(heights, idx)
    d0 = ad.gather(derivs, idx)
    d1 = ad.gather(derivs, (dim_idx, bins + 1))

    eps = ad._ensure(eps)
    # clamp outside lanes onto the boundary so the bin formulas stay finite;
    # their outputs are masked away below
    eps_eff = eps * inside + ad.constant(eps_clipped * (1.0 - inside))

    xi = (eps_eff - x_left) / w_b
    s = h_b / w_b
    one_m = 1.0 - xi
    q = xi * one_m
    mix = d1 + d0 - 2.0 * s
    den = s + mix * q
    z_spline = y_left + h_b * (s * xi * xi + d0 * q) / den
    deriv = s * s * (d1 * xi * xi + 2.0 * s * q + d0 * one_m * one_m) / (den * den)
    logd_spline = ad.log(deriv)

    z = z_spline * inside + eps * (1.0 - inside)
    logd = logd_spline * inside
    return z, logd


def rq_inverse(
    z: np.ndarray,
    tw: np.ndarray,
    th: np.ndarray,
    td: np.ndarray,
    n_bins: int = N_BINS,
    bound: float = TAIL_BOUND,
) -> np.ndarray:
    """Exact inverse of :func:`rq_forward` (values only)."""
    widths, heights, cw, ch, derivs = _bin_geometry(
        ad.constant(tw), ad.constant(th), ad.constant(td), n_bins, bound
    )
    widths, heights = widths.value, heights.value
    cw, ch, derivs = cw.value, ch.value, derivs.value

    z = np.asarray(z, dtype=np.float64)
    B, d = z.shape
    inside = (z >= -bound) & (z <= bound)
    z_c = np.clip(z, -bound, bound)

    bottom_internal = -bound + ch[:, : n_bins - 1]
    bins = (z_c[:, :, None] >= bottom_internal[None, :, :]).sum(axis=2)
    dim_idx = np.broadcast_to(np.arange(d), (B, d))

    x_left = -bound + (cw - widths)[dim_idx, bins]
    w_b = widths[dim_idx, bins]
    y_left = -bound + (ch - heights)[dim_idx, bins]
    h_b = heights[dim_idx, bins]
    d0 = derivs[dim_idx, bins]
    d1 = derivs[dim_idx, bins + 1]

    s = h_b / w_b
    delta = z_c - y_left
    mix = d1 + d0 - 2.0 * s
    a = h_b * (s - d0) + delta * mix
    b = h_b * d0 - delta * mix
    c = -s * delta
    disc = b * b - 4.0 * a * c
    xi = 2.0 * c / (-b - np.sqrt(np.maximum(disc, 0.0)))
    eps = x_left + xi * w_b
    return np.where(inside, eps, z)
