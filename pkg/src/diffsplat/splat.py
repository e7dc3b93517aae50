"""Point-to-volume conversion.

Two routes produce the occupancy volume of a transformed point set:

``basic``
    evaluates every point's Gaussian on the whole grid and sums them. Any
    per-point size is allowed (per-axis sigmas or full covariances). Cost is
    O(N·V).
``fast``
    deposits each point's weight on its eight neighboring cells with
    trilinear weights, then blurs the grid with one shared Gaussian kernel
    factorized into three 1D passes. Cost is O(N + V·L).

Positions are continuous grid coordinates (see :mod:`diffsplat.geom`); sizes
are in cells. Multi-channel weights ``(N, C)`` produce channel-first volumes
``(C, D1, D2, D3)``; this is how the signal numerator is accumulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .geom import GridSpec

DEFAULT_TRUNCATION = 3.0
# Bytes budget for one chunk of dense per-point evaluation.
_CHUNK_ELEMS = 1 << 22
# Above this axis length the banded matrix product loses to direct correlation.
_MATMUL_MAX_DIM = 256


def clip_unit(v) -> np.ndarray:
    return np.clip(v, 0.0, 1.0)


def canonical_order(*columns) -> np.ndarray:
    """Permutation that sorts points by all of their parameters.

    Accumulating in this order makes volumes independent of input order,
    bit for bit.
    """
    cols = [np.asarray(c, dtype=np.float64) for c in columns if c is not None]
    cols = [c.reshape(len(c), int(np.prod(c.shape[1:]))) for c in cols]
    if not cols or len(cols[0]) == 0:
        return np.arange(0)
    keys = np.concatenate(cols, axis=1)
    return np.lexsort(keys.T[::-1])


def _as_channels(weights) -> tuple[np.ndarray, bool]:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        return w[:, None], True
    return w, False


# --------------------------------------------------------------------------
# basic
# --------------------------------------------------------------------------


def axis_gaussians(u, sigma_axes, grid: GridSpec) -> list[np.ndarray]:
    """Per-axis factors ``exp(-(k - u)² / 2σ²)``, each ``(N, D_axis)``."""
    out = []
    for axis, d in enumerate(grid.dims):
        diff = np.arange(d)[None, :] - u[:, axis : axis + 1]
        out.append(np.exp(-0.5 * (diff / sigma_axes[:, axis : axis + 1]) ** 2))
    return out


def _accumulate_separable(u, sigma_axes, w, grid: GridSpec) -> np.ndarray:
    d1, d2, d3 = grid.dims
    n, c = w.shape
    out = np.zeros((c, d1 * d2, d3))
    chunk = max(1, _CHUNK_ELEMS // (d1 * d2))
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        gx, gy, gz = axis_gaussians(u[sl], sigma_axes[sl], grid)
        plane = (gx[:, :, None] * gy[:, None, :]).reshape(len(gx), d1 * d2)
        for ch in range(c):
            out[ch] += (plane * w[sl, ch : ch + 1]).T @ gz
    return out.reshape(c, d1, d2, d3)


def grid_offsets(u, grid: GridSpec):
    """Broadcastable per-axis offsets ``k - u`` shaped for (n, D1, D2, D3)."""
    d1, d2, d3 = grid.dims
    dx = (np.arange(d1)[None, :] - u[:, 0:1])[:, :, None, None]
    dy = (np.arange(d2)[None, :] - u[:, 1:2])[:, None, :, None]
    dz = (np.arange(d3)[None, :] - u[:, 2:3])[:, None, None, :]
    return dx, dy, dz


def quadratic_form(prec, dx, dy, dz) -> np.ndarray:
    p = prec[:, :, :, None, None, None]
    return (
        p[:, 0, 0] * dx * dx
        + p[:, 1, 1] * dy * dy
        + p[:, 2, 2] * dz * dz
        + 2.0 * (p[:, 0, 1] * dx * dy + p[:, 0, 2] * dx * dz + p[:, 1, 2] * dy * dz)
    )


def _accumulate_full(u, cov, w, grid: GridSpec) -> np.ndarray:
    n, c = w.shape
    out = np.zeros((c,) + grid.dims)
    prec = np.linalg.inv(cov)
    chunk = max(1, _CHUNK_ELEMS // grid.size)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        dx, dy, dz = grid_offsets(u[sl], grid)
        g = np.exp(-0.5 * quadratic_form(prec[sl], dx, dy, dz))
        for ch in range(c):
            out[ch] += np.tensordot(w[sl, ch], g, axes=(0, 0))
    return out


def accumulate_basic(u, grid_sizes, weights, grid: GridSpec) -> np.ndarray:
    """Unclipped ``Σ w_i exp(-½ dᵀ Σ_i⁻¹ d)`` on every cell center.

    ``grid_sizes`` is ``(N, 3)`` per-axis sigmas or ``(N, 3, 3)`` covariances.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    sizes = np.asarray(grid_sizes, dtype=np.float64)
    w, single = _as_channels(weights)
    order = canonical_order(u, sizes, w)
    u, sizes, w = u[order], sizes[order], w[order]
    if len(u) == 0:
        vol = np.zeros((w.shape[1],) + grid.dims)
    elif sizes.ndim == 2:
        vol = _accumulate_separable(u, sizes, w, grid)
    else:
        vol = _accumulate_full(u, sizes, w, grid)
    return vol[0] if single else vol


def splat_basic(u, grid_sizes, scales, grid: GridSpec) -> np.ndarray:
    """Clipped occupancy volume evaluated per point on the full grid."""
    return clip_unit(accumulate_basic(u, grid_sizes, scales, grid))


# --------------------------------------------------------------------------
# fast
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Kernel1D:
    taps: np.ndarray
    center: int
    sigma: float
    truncation: float

    def __len__(self) -> int:
        return len(self.taps)

    def sigma_derivative(self) -> np.ndarray:
        """``d taps / d sigma`` at fixed support."""
        j = np.arange(len(self.taps)) - self.center
        return self.taps * j**2 / self.sigma**3


def gaussian_kernel_1d(sigma_cells: float, truncation: float = DEFAULT_TRUNCATION) -> Kernel1D:
    """Un-normalized Gaussian taps with a peak of exactly 1."""
    if not sigma_cells > 0:
        raise ValueError("sigma_cells must be positive")
    radius = int(math.ceil(truncation * sigma_cells))
    j = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-(j**2) / (2.0 * sigma_cells**2))
    taps[radius] = 1.0
    return Kernel1D(taps, radius, float(sigma_cells), float(truncation))


def banded_matrix(taps, center: int, d: int) -> np.ndarray:
    """``K[i, j] = taps[center + j - i]`` with zeros outside the support."""
    mat = np.zeros((d, d))
    for off in range(-center, len(taps) - center):
        if abs(off) < d:
            idx = np.arange(max(0, -off), min(d, d - off))
            mat[idx, idx + off] = taps[center + off]
    return mat


def correlate_axis(vol, taps, center: int, axis: int) -> np.ndarray:
    """Zero-padded correlation along one spatial axis of a ``(..., D1, D2, D3)`` array.

    Kernels here are symmetric, so this operator is its own adjoint.
    """
    axis = vol.ndim - 3 + axis
    d = vol.shape[axis]
    if d > _MATMUL_MAX_DIM:
        origin = center - (len(taps) - 1) // 2
        return correlate1d(vol, np.asarray(taps), axis=axis, mode="constant", cval=0.0, origin=origin)
    mat = banded_matrix(taps, center, d)
    lead = vol.shape[: vol.ndim - 3]
    d1, d2, d3 = vol.shape[-3:]
    if axis == vol.ndim - 1:
        return vol @ mat.T
    if axis == vol.ndim - 2:
        return mat @ vol
    flat = np.ascontiguousarray(vol).reshape(lead + (d1, d2 * d3))
    return (mat @ flat).reshape(vol.shape)


def blur(vol, kernels) -> np.ndarray:
    out = vol
    for axis, k in enumerate(kernels):
        out = correlate_axis(out, k.taps, k.center, axis)
    return out


def axis_kernels(sigma_cells, truncation: float = DEFAULT_TRUNCATION) -> list[Kernel1D]:
    sig = np.broadcast_to(np.asarray(sigma_cells, dtype=np.float64), (3,))
    return [gaussian_kernel_1d(float(s), truncation) for s in sig]


def trilinear_corners(u, grid: GridSpec):
    """Flat indices ``(N, 8)``, weights ``(N, 8)`` and in-grid mask of the 8 neighbors.

    Also returns the per-axis base index and fraction needed for adjoints.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    base = np.floor(u)
    frac = u - base
    base = base.astype(np.int64)
    dims = np.asarray(grid.dims)
    idx = np.empty((len(u), 8), dtype=np.int64)
    wts = np.empty((len(u), 8))
    inside = np.empty((len(u), 8), dtype=bool)
    for corner in range(8):
        bits = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        cell = base + bits
        wts[:, corner] = np.prod(np.where(bits, frac, 1.0 - frac), axis=1)
        inside[:, corner] = np.all((cell >= 0) & (cell < dims), axis=1)
        cell = np.clip(cell, 0, dims - 1)
        idx[:, corner] = (cell[:, 0] * dims[1] + cell[:, 1]) * dims[2] + cell[:, 2]
    return idx, wts, inside, base, frac


def _scatter_channels(u, w, grid: GridSpec) -> np.ndarray:
    idx, wts, inside, _, _ = trilinear_corners(u, grid)
    wts = wts * inside
    flat_idx = idx.ravel()
    out = np.empty((w.shape[1], grid.size))
    for ch in range(w.shape[1]):
        out[ch] = np.bincount(flat_idx, weights=(wts * w[:, ch : ch + 1]).ravel(), minlength=grid.size)
    return out.reshape((w.shape[1],) + grid.dims)


def trilinear_scatter(u, scales, grid: GridSpec) -> np.ndarray:
    """Deposit each weight on its 8 neighboring cell centers; out-of-grid mass is dropped."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    w, single = _as_channels(scales)
    order = canonical_order(u, w)
    vol = _scatter_channels(u[order], w[order], grid)
    return vol[0] if single else vol


def accumulate_fast(u, weights, sigma_cells, grid: GridSpec, truncation: float = DEFAULT_TRUNCATION):
    """Unclipped scatter-then-blur volume."""
    return blur(trilinear_scatter(u, weights, grid), axis_kernels(sigma_cells, truncation))


def splat_fast(u, scales, shared_sigma_cells, grid: GridSpec, truncation: float = DEFAULT_TRUNCATION):
    """Clipped occupancy from trilinear scatter and a shared separable Gaussian."""
    return clip_unit(accumulate_fast(u, scales, shared_sigma_cells, grid, truncation))
