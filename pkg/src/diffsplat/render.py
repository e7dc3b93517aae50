"""Occlusion reasoning and projection: the full point cloud -> image pipeline.

Image rows follow grid axis 1, columns grid axis 2; grid axis 3 is the
viewing ray, cell 0 closest to the camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import splat
from .geom import CameraModel, GridSpec, PointCloud, Pose, camera_transform, reference_sigma_cells

SIGNAL_EPS = 1e-8
MODALITIES = ("silhouette", "depth", "color")
_ALIASES = {"sil": "silhouette", "rgb": "color", "colour": "color"}


def canonical_modality(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in MODALITIES:
        raise ValueError(f"unknown modality {name!r}")
    return name


def ray_termination(occ) -> np.ndarray:
    """Termination probabilities ``(D1, D2, D3 + 1)``; the last cell is background."""
    occ = np.asarray(occ, dtype=np.float64)
    free = 1.0 - occ
    transmit = np.cumprod(free, axis=-1)
    term = np.empty(occ.shape[:-1] + (occ.shape[-1] + 1,))
    term[..., 0] = occ[..., 0]
    term[..., 1:-1] = occ[..., 1:] * transmit[..., :-1]
    term[..., -1] = transmit[..., -1]
    return term


def depth_values(d3: int) -> np.ndarray:
    """Depth signal ``k / D3`` for 1-based ``k = 1 .. D3 + 1`` (background last)."""
    return np.arange(1, d3 + 2) / d3


def project(term, modality: str = "silhouette", signal=None, background=None) -> np.ndarray:
    """Collapse termination probabilities along the ray.

    ``signal`` is the ``(D1, D2, D3, C)`` normalized signal volume for the
    color modality; ``background`` its color seen through empty rays.
    """
    modality = canonical_modality(modality)
    term = np.asarray(term, dtype=np.float64)
    if modality == "silhouette":
        return term[..., :-1].sum(axis=-1)
    if modality == "depth":
        return term @ depth_values(term.shape[-1] - 1)
    if signal is None:
        raise ValueError("color projection needs a signal volume")
    signal = np.asarray(signal, dtype=np.float64)
    bg = np.zeros(signal.shape[-1]) if background is None else np.asarray(background, dtype=np.float64)
    return np.einsum("abk,abkc->abc", term[..., :-1], signal) + term[..., -1:] * bg


def normalize_signal(numer, denom) -> np.ndarray:
    """``numer / denom`` where the denominator is at least ``SIGNAL_EPS``, else 0.

    ``numer`` is channel-first ``(C, D1, D2, D3)``; output is ``(D1, D2, D3, C)``.
    """
    ok = denom >= SIGNAL_EPS
    out = np.where(ok, numer / np.where(ok, denom, 1.0), 0.0)
    return np.moveaxis(out, 0, -1)


def signal_volume(u, grid_sizes, values, grid: GridSpec, scales=None) -> np.ndarray:
    """Density-weighted average of per-point signals on the grid.

    ``scales`` default to one; they weight both numerator and denominator.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    values = np.asarray(values, dtype=np.float64).reshape(len(u), -1)
    scales = np.ones(len(u)) if scales is None else np.asarray(scales, dtype=np.float64)
    weights = np.concatenate([scales[:, None], scales[:, None] * values], axis=1)
    acc = splat.accumulate_basic(u, grid_sizes, weights, grid)
    return normalize_signal(acc[1:], acc[0])


@dataclass
class RenderTrace:
    """Forward intermediates kept for the adjoint pass."""

    modality: str
    path: str
    kept: np.ndarray  # indices into the cloud of the points that were splatted
    u: np.ndarray
    grid_sizes: np.ndarray | None
    sigma_cells: np.ndarray | None
    weights: np.ndarray  # (n, 1 + C): scale, scale * signal
    density: np.ndarray  # unclipped occupancy
    occ: np.ndarray
    term: np.ndarray
    numer: np.ndarray | None
    signal: np.ndarray | None
    background: np.ndarray | None
    image: np.ndarray
    truncation: float


def _kept_indices(cloud: PointCloud, dropout_mask) -> np.ndarray:
    if dropout_mask is None:
        return np.arange(len(cloud))
    mask = np.asarray(dropout_mask, dtype=bool)
    if mask.shape != (len(cloud),):
        raise ValueError("dropout mask must have one entry per point")
    return np.flatnonzero(mask)


def render_trace(
    cloud: PointCloud,
    pose: Pose,
    cam: CameraModel,
    grid: GridSpec,
    modality: str = "silhouette",
    path: str = "basic",
    dropout_mask=None,
    background=None,
    truncation: float = splat.DEFAULT_TRUNCATION,
) -> RenderTrace:
    modality = canonical_modality(modality)
    if path not in ("basic", "fast"):
        raise ValueError(f"unknown splatting path {path!r}")
    if modality != "silhouette" and len(cloud) == 0:
        raise ValueError(f"{modality} rendering needs a nonempty cloud")
    if modality == "color" and cloud.colors is None:
        raise ValueError("color rendering needs per-point colors")
    sigma_cells = None
    if path == "fast":
        shared = cloud.shared_sigma()
        if shared is None:
            raise ValueError("fast path requires shared sigma")

    kept = _kept_indices(cloud, dropout_mask)
    sub = cloud.subset(kept)
    u, grid_sizes, valid = camera_transform(sub.positions, sub.world_sizes(), pose, cam, grid)
    kept, u, grid_sizes = kept[valid], u[valid], grid_sizes[valid]
    scales = cloud.scales[kept]
    weights = scales[:, None]
    if modality == "color":
        weights = np.concatenate([weights, scales[:, None] * cloud.colors[kept]], axis=1)

    if path == "fast":
        sigma_cells = reference_sigma_cells(shared if shared else 1.0, cam, grid)
        acc = splat.accumulate_fast(u, weights, sigma_cells, grid, truncation)
        grid_sizes = None
    else:
        acc = splat.accumulate_basic(u, grid_sizes, weights, grid)
    density = acc[0]
    occ = splat.clip_unit(density)
    term = ray_termination(occ)
    numer = signal = bg = None
    if modality == "color":
        numer = acc[1:]
        signal = normalize_signal(numer, density)
        bg = np.zeros(signal.shape[-1]) if background is None else np.asarray(background, dtype=np.float64)
    image = project(term, modality, signal, bg)
    return RenderTrace(
        modality, path, kept, u, grid_sizes, sigma_cells, weights, density, occ, term,
        numer, signal, bg, image, truncation,
    )


def render(
    cloud: PointCloud,
    pose: Pose,
    cam: CameraModel,
    grid: GridSpec,
    modality: str = "silhouette",
    path: str = "basic",
    dropout_mask=None,
    background=None,
    truncation: float = splat.DEFAULT_TRUNCATION,
) -> np.ndarray:
    """Render ``cloud`` seen from ``pose``.

    Returns a ``(D1, D2)`` image for silhouette and depth, ``(D1, D2, C)`` for color.
    """
    return render_trace(cloud, pose, cam, grid, modality, path, dropout_mask, background, truncation).image
