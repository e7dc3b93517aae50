"""Quaternions, poses, camera models and the world-to-grid transform.

Conventions used throughout the package:

* quaternions are stored as ``(w, x, y, z)`` arrays, Hamilton product,
  right-handed frames, counterclockwise-positive rotations;
* a :class:`Pose` maps world points into the camera frame,
  ``x_cam = R(q) @ x + t``; the camera looks along its ``+z`` axis;
* grid coordinates are continuous cell indices: the center of cell ``k`` on
  axis ``i`` sits at ``k`` and corresponds to the normalized coordinate
  ``k / D_i - 0.5``. Axis 3 (index 2) is depth, cell 0 nearest the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
COV_EIG_FLOOR = 1e-12


# --------------------------------------------------------------------------
# quaternion algebra
# --------------------------------------------------------------------------


def as_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    return q


def quat_normalize(q) -> np.ndarray:
    q = as_quat(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-300):
        raise ValueError("cannot normalize a zero quaternion")
    return q / norm


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product ``a ⊗ b`` (broadcasts over leading axes)."""
    a = as_quat(a)
    b = as_quat(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q) -> np.ndarray:
    q = as_quat(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_inv(q) -> np.ndarray:
    q = as_quat(q)
    return quat_conj(q) / np.sum(q * q, axis=-1, keepdims=True)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        return IDENTITY_QUAT.copy()
    axis = axis / norm
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of ``q / |q|``; identical for ``q`` and ``-q``."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def quat_matrix_jacobian(q) -> np.ndarray:
    """``dR/dq̂`` for a unit quaternion ``q̂``, shape ``(..., 4, 3, 3)``."""
    w, x, y, z = np.moveaxis(as_quat(q), -1, 0)
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, -1) for r in rows], -2)

    dw = mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dx = mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dz = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])
    return 2.0 * np.stack([dw, dx, dy, dz], axis=-3)


def quat_matrix_vjp(q, d_matrix) -> np.ndarray:
    """Pull a cotangent on ``quat_to_matrix(q)`` back to the raw (ambient) ``q``."""
    q = as_quat(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qhat = q / norm
    d_qhat = np.einsum("...kij,...ij->...k", quat_matrix_jacobian(qhat), d_matrix)
    radial = np.sum(d_qhat * qhat, axis=-1, keepdims=True)
    return (d_qhat - radial * qhat) / norm


def quat_rotate(q, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v @ quat_to_matrix(q).T


def quat_from_matrix(m) -> np.ndarray:
    """Unit quaternion (``w >= 0``) for a proper rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = 2.0 * np.sqrt(trace + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def random_quat(rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniformly distributed unit quaternions (normalized 4D Gaussians)."""
    shape = (4,) if size is None else (size, 4)
    return quat_normalize(rng.standard_normal(shape))


# --------------------------------------------------------------------------
# poses, cameras, grids
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", as_quat(self.rotation).copy())
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).copy())

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def normalized(self) -> "Pose":
        return Pose(quat_normalize(self.rotation), self.translation)


@dataclass(frozen=True)
class CameraModel:
    kind: str = "ortho"
    focal: float = 1.875
    near: float = 1.0
    far: float = 3.0
    half_width: float = 0.5

    def __post_init__(self):
        kind = {"orthographic": "ortho", "perspective": "persp"}.get(self.kind, self.kind)
        if kind not in ("ortho", "persp"):
            raise ValueError(f"unknown camera kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "persp" and not (self.focal > 0 and self.far > self.near > 0):
            raise ValueError("perspective camera needs focal > 0 and far > near > 0")
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")

    @property
    def extent(self) -> float:
        """Side length of the canonical cube."""
        return 2.0 * self.half_width

    @property
    def perspective(self) -> bool:
        return self.kind == "persp"

    def default_distance(self) -> float:
        return 0.5 * (self.near + self.far) if self.perspective else 0.0


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, int, int]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"grid dims must be three positive integers, got {self.dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def cube(cls, d: int) -> "GridSpec":
        return cls((d, d, d))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def normalized_centers(self, axis: int) -> np.ndarray:
        """Cell-center coordinates ``k / D - 0.5`` along one axis."""
        d = self.dims[axis]
        return np.arange(d) / d - 0.5


# --------------------------------------------------------------------------
# point sizes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Isotropic:
    scale: float
    sigma: float

    def covariance(self) -> np.ndarray:
        return self.sigma**2 * np.eye(3)


@dataclass(frozen=True)
class FullCov:
    """Gaussian with principal standard deviations ``diag`` rotated by ``orientation``."""

    scale: float
    diag: np.ndarray
    orientation: np.ndarray

    def covariance(self) -> np.ndarray:
        return covariance_from_params(np.asarray(self.diag), np.asarray(self.orientation))


SizeParams = Union[Isotropic, FullCov]


def covariance_from_params(diag, orientation) -> np.ndarray:
    """``R diag(d²) Rᵀ``; broadcasts over leading axes."""
    diag = np.asarray(diag, dtype=np.float64)
    rot = quat_to_matrix(orientation)
    return np.einsum("...ij,...j,...kj->...ik", rot, diag**2, rot)


def params_from_covariance(cov) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`covariance_from_params` for one SPD matrix."""
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals, COV_EIG_FLOOR)
    if np.linalg.det(evecs) < 0:
        evecs[:, 0] = -evecs[:, 0]
    return np.sqrt(evals), quat_from_matrix(evecs)


def transform_covariance(size: SizeParams, pose: Pose, local_jacobian) -> FullCov:
    """Push a point's covariance through the pose rotation and a local Jacobian."""
    jac = np.asarray(local_jacobian, dtype=np.float64) @ pose.matrix()
    cov = jac @ size.covariance() @ jac.T
    diag, orientation = params_from_covariance(cov)
    return FullCov(size.scale, diag, orientation)


@dataclass
class PointCloud:
    """Points with Gaussian sizes and an optional per-point signal.

    Sizes are either isotropic (``sigmas``) or full covariances given by
    per-axis standard deviations ``cov_diag`` and orientations ``cov_rotation``.
    """

    positions: np.ndarray
    scales: np.ndarray
    sigmas: np.ndarray | None = None
    cov_diag: np.ndarray | None = None
    cov_rotation: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.scales = np.broadcast_to(np.asarray(self.scales, dtype=np.float64), (n,)).copy()
        if self.sigmas is not None:
            self.sigmas = np.broadcast_to(np.asarray(self.sigmas, dtype=np.float64), (n,)).copy()
        if self.cov_diag is not None:
            self.cov_diag = np.asarray(self.cov_diag, dtype=np.float64).reshape(n, 3)
            rot = IDENTITY_QUAT if self.cov_rotation is None else self.cov_rotation
            self.cov_rotation = np.broadcast_to(np.asarray(rot, dtype=np.float64), (n, 4)).copy()
        if (self.sigmas is None) == (self.cov_diag is None):
            raise ValueError("exactly one of sigmas or cov_diag must be given")
        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.float64)
            # an empty cloud can't infer the channel count from reshape(0, -1)
            self.colors = colors if colors.ndim == 2 and len(colors) == n else colors.reshape(n, -1)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def full_covariance(self) -> bool:
        return self.cov_diag is not None

    def world_sizes(self) -> np.ndarray:
        """``(N,)`` isotropic sigmas or ``(N, 3, 3)`` covariances."""
        if self.full_covariance:
            return covariance_from_params(self.cov_diag, self.cov_rotation)
        return self.sigmas

    def shared_sigma(self) -> float | None:
        if self.full_covariance or len(self) == 0:
            return None if self.full_covariance else 0.0
        if np.all(self.sigmas == self.sigmas[0]):
            return float(self.sigmas[0])
        return None

    def subset(self, mask) -> "PointCloud":
        pick = lambda a: None if a is None else a[mask]  # noqa: E731
        return PointCloud(
            self.positions[mask],
            self.scales[mask],
            pick(self.sigmas),
            pick(self.cov_diag),
            pick(self.cov_rotation),
            pick(self.colors),
        )


# --------------------------------------------------------------------------
# world -> grid
# --------------------------------------------------------------------------


def _grid_scale(cam: CameraModel, grid: GridSpec) -> np.ndarray:
    """du/dn: normalized cube coordinate to continuous cell index."""
    return np.asarray(grid.dims, dtype=np.float64)


def camera_frame(positions, pose: Pose) -> np.ndarray:
    return np.asarray(positions, dtype=np.float64) @ pose.matrix().T + pose.translation


def frustum_map(x_cam, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points to normalized cube coordinates in ``[-0.5, 0.5]``.

    Returns ``(n, valid)``; ``valid`` is False for perspective points at depth <= 0.
    """
    x_cam = np.asarray(x_cam, dtype=np.float64)
    if not cam.perspective:
        return x_cam / cam.extent, np.ones(len(x_cam), dtype=bool)
    depth = x_cam[:, 2]
    valid = depth > 0
    safe = np.where(valid, depth, 1.0)
    a = cam.focal / cam.extent
    n = np.empty_like(x_cam)
    n[:, 0] = a * x_cam[:, 0] / safe
    n[:, 1] = a * x_cam[:, 1] / safe
    n[:, 2] = (depth - cam.near) / (cam.far - cam.near) - 0.5
    return n, valid


def frustum_jacobian(x_cam, cam: CameraModel) -> np.ndarray:
    """``dn/dx_cam`` per point, shape ``(N, 3, 3)``."""
    x_cam = np.asarray(x_cam, dtype=np.float64)
    n = len(x_cam)
    jac = np.zeros((n, 3, 3))
    if not cam.perspective:
        jac[:, [0, 1, 2], [0, 1, 2]] = 1.0 / cam.extent
        return jac
    a = cam.focal / cam.extent
    z = np.where(x_cam[:, 2] > 0, x_cam[:, 2], 1.0)
    jac[:, 0, 0] = a / z
    jac[:, 1, 1] = a / z
    jac[:, 0, 2] = -a * x_cam[:, 0] / z**2
    jac[:, 1, 2] = -a * x_cam[:, 1] / z**2
    jac[:, 2, 2] = 1.0 / (cam.far - cam.near)
    return jac


def world_to_grid(positions, pose: Pose, cam: CameraModel, grid: GridSpec):
    """Positions only: returns continuous grid coordinates and the validity mask."""
    n, valid = frustum_map(camera_frame(positions, pose), cam)
    return (n + 0.5) * _grid_scale(cam, grid), valid


def grid_to_world(u, pose: Pose, cam: CameraModel, grid: GridSpec) -> np.ndarray:
    """Inverse of :func:`world_to_grid`."""
    n = np.asarray(u, dtype=np.float64) / _grid_scale(cam, grid) - 0.5
    if cam.perspective:
        depth = (n[:, 2] + 0.5) * (cam.far - cam.near) + cam.near
        a = cam.focal / cam.extent
        x_cam = np.stack([n[:, 0] * depth / a, n[:, 1] * depth / a, depth], axis=1)
    else:
        x_cam = n * cam.extent
    return (x_cam - pose.translation) @ pose.matrix()


def camera_transform(positions, sizes, pose: Pose, cam: CameraModel, grid: GridSpec):
    """Map world points and sizes into continuous grid coordinates.

    ``sizes`` is either ``(N,)`` isotropic sigmas or ``(N, 3, 3)`` world
    covariances. The returned grid sizes are ``(N, 3)`` per-axis sigmas when
    the transformed Gaussians are axis-aligned by construction (isotropic
    input, orthographic camera), otherwise ``(N, 3, 3)`` covariances obtained
    with the local Jacobian at each point mean.

    Returns ``(u, grid_sizes, valid)``.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    sizes = np.asarray(sizes, dtype=np.float64)
    x_cam = camera_frame(positions, pose)
    n, valid = frustum_map(x_cam, cam)
    scale = _grid_scale(cam, grid)
    u = (n + 0.5) * scale
    if sizes.ndim == 1 and not cam.perspective:
        grid_sizes = sizes[:, None] * (scale / cam.extent)
    else:
        cov = (sizes**2)[:, None, None] * np.eye(3) if sizes.ndim == 1 else sizes
        jac = scale[None, :, None] * frustum_jacobian(x_cam, cam) @ pose.matrix()
        grid_sizes = jac @ cov @ np.swapaxes(jac, -1, -2)
        grid_sizes = 0.5 * (grid_sizes + np.swapaxes(grid_sizes, -1, -2))
    return u, grid_sizes, valid


def reference_sigma_cells(sigma: float, cam: CameraModel, grid: GridSpec) -> np.ndarray:
    """Per-axis grid sigma of a world-isotropic Gaussian at the cube center.

    Exact for orthographic cameras; for perspective cameras it is the local
    footprint at depth ``(near + far) / 2``, used by the shared-kernel path.
    """
    scale = _grid_scale(cam, grid)
    if not cam.perspective:
        return sigma * scale / cam.extent
    center = np.array([[0.0, 0.0, cam.default_distance()]])
    jac = frustum_jacobian(center, cam)[0]
    return sigma * scale * np.abs(np.diag(jac))
