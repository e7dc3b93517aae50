"""Synthetic targets and camera sampling for end-to-end fixtures."""

from __future__ import annotations

import math

import numpy as np

from .geom import CameraModel, GridSpec, PointCloud, Pose, quat_from_axis_angle, quat_mul
from .render import render

DEFAULT_ELEV_RANGE = (-20.0, 40.0)
DEFAULT_AZIM_RANGE = (0.0, 360.0)


def orbit_pose(elev_deg: float, azim_deg: float, distance: float) -> Pose:
    """Camera on an orbit around the origin, up axis +y.

    Rotation is ``R_x(-elev) R_y(azim)``, so positive elevation lifts the
    camera above the object; it sits ``distance`` away along its viewing axis.
    """
    qx = quat_from_axis_angle([1.0, 0.0, 0.0], -math.radians(elev_deg))
    qy = quat_from_axis_angle([0.0, 1.0, 0.0], math.radians(azim_deg))
    return Pose(quat_mul(qx, qy), [0.0, 0.0, distance])


def sample_poses(m: int, rng: np.random.Generator, cam: CameraModel,
                 elev_range=DEFAULT_ELEV_RANGE, azim_range=DEFAULT_AZIM_RANGE) -> list[Pose]:
    """``m`` orbit poses with uniform elevation in ``[a, b]`` and azimuth in ``[a, b)``."""
    if m < 1:
        raise ValueError("need at least one view")
    elev = rng.uniform(elev_range[0], elev_range[1], m)
    azim = rng.uniform(azim_range[0], azim_range[1], m)
    dist = cam.default_distance()
    return [orbit_pose(e, a, dist) for e, a in zip(elev, azim)]


def render_views(cloud: PointCloud, poses, cam: CameraModel, grid: GridSpec,
                 modality: str = "silhouette", path: str = "basic") -> list[np.ndarray]:
    return [render(cloud, p, cam, grid, modality, path) for p in poses]


def sample_boxes(boxes, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform over a union of axis-aligned boxes ``(lo, hi)``, volume-weighted."""
    lo = np.array([b[0] for b in boxes], dtype=np.float64)
    hi = np.array([b[1] for b in boxes], dtype=np.float64)
    vol = np.prod(hi - lo, axis=1)
    which = rng.choice(len(boxes), n, p=vol / vol.sum())
    return lo[which] + rng.random((n, 3)) * (hi - lo)[which]


# A bracket with a short arm and a post: no mirror or rotational symmetry.
ASYMMETRIC_BOXES = [
    ((-0.30, -0.25, -0.10), (0.30, -0.12, 0.15)),
    ((-0.30, -0.12, -0.10), (-0.18, 0.30, 0.15)),
    ((0.05, -0.12, 0.02), (0.15, 0.10, 0.12)),
]
# 0.8 long and 0.03 thick: isotropic points would need to shrink to the
# thickness and then leave gaps along the length
BAR_BOX = [((-0.4, -0.015, -0.015), (0.4, 0.015, 0.015))]


def asymmetric_shape(n: int, rng: np.random.Generator, sigma: float = 0.025, scale: float = 1.0) -> PointCloud:
    return PointCloud(sample_boxes(ASYMMETRIC_BOXES, n, rng), scale, sigmas=sigma)


def bar_shape(n: int, rng: np.random.Generator, sigma: float = 0.01, scale: float = 1.0) -> PointCloud:
    """Thin elongated bar along x."""
    return PointCloud(sample_boxes(BAR_BOX, n, rng), scale, sigmas=sigma)


def constellation(sigma: float = 0.04) -> PointCloud:
    """Three points with distinct pairwise distances."""
    pts = np.array([[-0.2, -0.1, 0.0], [0.15, -0.1, 0.05], [0.0, 0.2, -0.1]])
    return PointCloud(pts, 1.0, sigmas=sigma)
