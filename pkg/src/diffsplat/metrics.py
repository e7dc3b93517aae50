"""Evaluation: Chamfer distance, pose errors and rigid alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.spatial import cKDTree

from .geom import IDENTITY_QUAT, as_quat, quat_from_matrix, quat_to_matrix

# Exact nearest neighbors: the tree proposes a few candidates and the
# distance is recomputed with one fixed formula, so near-ties resolve the
# same way a brute-force scan would.
_NN_CANDIDATES = 4


def point_distances(a, b) -> np.ndarray:
    """Euclidean distances between matching rows, ``sqrt(dx² + dy² + dz²)``."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def nearest_neighbors(queries, points, tree: cKDTree | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Distance to and index of the closest row of ``points`` for every query."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tree = tree or cKDTree(points)
    k = min(_NN_CANDIDATES, len(points))
    _, idx = tree.query(queries, k=k)
    idx = idx.reshape(len(queries), k)
    dist = point_distances(queries[:, None, :], points[idx])
    # stable argmin keeps the lowest-distance, earliest-listed candidate
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(queries))
    return dist[rows, best], idx[rows, best]


@dataclass
class ChamferReport:
    precision: float
    coverage: float
    total: float
    total_x100_normalized: float

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "coverage": self.coverage,
            "total": self.total,
            "total_x100_normalized": self.total_x100_normalized,
        }


def normalization(points) -> tuple[np.ndarray, float]:
    """Centroid and bounding-box diagonal of a cloud."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    diag = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    return points.mean(axis=0), diag


def chamfer_terms(pred, gt) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("chamfer distance needs two nonempty point sets")
    # correctly rounded sums, so the result doesn't depend on summation order
    precision = math.fsum(nearest_neighbors(pred, gt)[0]) / len(pred)
    coverage = math.fsum(nearest_neighbors(gt, pred)[0]) / len(gt)
    return precision, coverage


def chamfer(pred, gt) -> ChamferReport:
    """Mean nearest-neighbor distances pred→gt (precision) and gt→pred (coverage).

    The normalized variant moves both clouds by the ground truth's centroid
    and scales them so its bounding-box diagonal is 1, then multiplies by 100.
    """
    precision, coverage = chamfer_terms(pred, gt)
    center, diag = normalization(gt)
    if diag > 0:
        p_n, c_n = chamfer_terms((np.asarray(pred) - center) / diag, (np.asarray(gt) - center) / diag)
        x100 = 100.0 * (p_n + c_n)
    else:
        # a single ground-truth point has no extent to normalize by
        x100 = math.nan
    return ChamferReport(precision, coverage, precision + coverage, x100)


# --------------------------------------------------------------------------
# poses
# --------------------------------------------------------------------------


def pose_angle(q1, q2) -> float:
    """Rotation angle in degrees between two quaternions, sign-insensitive."""
    a, b = as_quat(q1), as_quat(q2)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm quaternion")
    c = min(1.0, abs(float(a @ b)) / (na * nb))
    return math.degrees(2.0 * math.acos(c))


@dataclass
class PoseReport:
    errors: np.ndarray
    accuracy_30: float
    median_deg: float

    def as_dict(self) -> dict:
        return {"accuracy_30": self.accuracy_30, "median_deg": self.median_deg,
                "per_sample": [float(e) for e in self.errors]}


def pose_metrics(errors, threshold: float = 30.0) -> PoseReport:
    """Fraction of errors within ``threshold`` degrees (inclusive) and the median."""
    err = np.asarray(errors, dtype=np.float64).ravel()
    if err.size == 0:
        raise ValueError("no pose errors given")
    return PoseReport(err, float(np.mean(err <= threshold)), float(np.median(err)))


# --------------------------------------------------------------------------
# rigid alignment
# --------------------------------------------------------------------------


@dataclass
class RigidTransform:
    """``x -> scale * R x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = as_quat(self.rotation)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self.scale * pts @ self.matrix().T + self.translation

    def as_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist(), "scale": self.scale}


def _fit_rigid(src, dst, with_scale: bool):
    """Least-squares ``(s, R, t)`` with ``R`` proper; returns the 3x3 matrix."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("correspondence count mismatch")
    if len(src) < 3:
        raise ValueError("need at least 3 correspondences")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise ValueError("degenerate configuration: points are coincident or collinear")
    u, s, vt = np.linalg.svd(b.T @ a)
    fix = np.ones(3)
    fix[2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = (u * fix) @ vt
    scale = 1.0
    if with_scale:
        scale = float(np.sum(s * fix) / np.sum(a * a))
    return scale, rot, cd - scale * rot @ cs


def kabsch(src, dst, with_scale: bool = False) -> RigidTransform:
    """Rigid (optionally similarity) transform minimizing ``Σ |T(src_i) - dst_i|²``."""
    scale, rot, t = _fit_rigid(src, dst, with_scale)
    return RigidTransform(quat_from_matrix(rot), t, scale)


def cube_rotations() -> list[np.ndarray]:
    """The 24 proper rotations mapping the coordinate axes onto themselves."""
    mats = []
    for perm in ((0, 1, 2), (1, 2, 0), (2, 0, 1), (0, 2, 1), (2, 1, 0), (1, 0, 2)):
        for signs in product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            m[[0, 1, 2], perm] = signs
            if np.linalg.det(m) > 0:
                mats.append(m)
    return mats


@dataclass
class IcpResult:
    transform: RigidTransform
    rms: float
    rms_trace: list[float]
    iterations: int


def _icp_from(src, dst, tree, init: RigidTransform, max_iters: int, tol: float, with_scale: bool) -> IcpResult:
    current = init
    trace: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        _, nn = nearest_neighbors(current.apply(src), dst, tree)
        current = kabsch(src, dst[nn], with_scale)
        resid = point_distances(current.apply(src), dst[nn])
        rms = float(np.sqrt(np.mean(resid * resid)))
        trace.append(rms)
        if len(trace) > 1 and trace[-2] - rms < tol:
            break
        if rms == 0.0:
            break
    d, _ = nearest_neighbors(current.apply(src), dst, tree)
    final = float(np.sqrt(np.mean(d * d)))
    return IcpResult(current, final, trace, it)


def icp_align(src, dst, max_iters: int = 50, tol: float = 1e-10, with_scale: bool = False,
              restarts: bool = False) -> IcpResult:
    """Align ``src`` onto ``dst`` by alternating nearest neighbors and :func:`kabsch`.

    With ``restarts`` the search is also started from the 24 axis-aligned
    rotations about the centroids and the lowest-rms result is kept.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) < 3 or len(dst) < 3:
        raise ValueError("ICP needs at least 3 points per cloud")
    tree = cKDTree(dst)
    inits = [RigidTransform()]
    if restarts:
        cs, cd = src.mean(axis=0), dst.mean(axis=0)
        inits += [RigidTransform(quat_from_matrix(m), cd - m @ cs) for m in cube_rotations()]
    best = None
    for init in inits:
        res = _icp_from(src, dst, tree, init, max_iters, tol, with_scale)
        if best is None or res.rms < best.rms:
            best = res
    return best
