"""Randomized adjoint-versus-finite-difference checks over every parameter group."""

from __future__ import annotations

import math

import numpy as np

from .diff import finite_diff_check, vjp_render
from .geom import CameraModel, GridSpec, PointCloud, Pose, random_quat
from .render import SIGNAL_EPS, render_trace

# Instances whose unclipped density comes this close to 1 (the clip kink)
# are redrawn; a central difference straddling the kink is meaningless.
KINK_MARGIN = 1e-3
# The color signal is zeroed where density falls below SIGNAL_EPS, a jump;
# instances with a tail cell within this log-ratio of the threshold are redrawn.
EPS_LOG_MARGIN = 1e-2
# Central-difference step relative to the typical magnitude of each group.
FD_RELATIVE_STEP = 1e-4

GROUPS = ("positions", "scale", "sigma", "cov_diag", "cov_orientation", "color", "rotation", "translation")


def _copy(cloud: PointCloud, **changes) -> PointCloud:
    fields = {
        "positions": cloud.positions, "scales": cloud.scales, "sigmas": cloud.sigmas,
        "cov_diag": cloud.cov_diag, "cov_rotation": cloud.cov_rotation, "colors": cloud.colors,
    }
    fields.update(changes)
    return PointCloud(**fields)


def _kink_free(cloud, pose, cam, grid, path) -> bool:
    trace = render_trace(cloud, pose, cam, grid, "silhouette", path)
    if len(trace.kept) != len(cloud):
        return False
    if np.min(np.abs(trace.density - 1.0)) < KINK_MARGIN:
        return False
    tail = trace.density[trace.density > 0]
    if tail.size and np.min(np.abs(np.log(tail / SIGNAL_EPS))) < EPS_LOG_MARGIN:
        return False
    if path == "fast":
        # trilinear weights are piecewise linear across cell boundaries
        frac = trace.u - np.floor(trace.u)
        if np.min(np.minimum(frac, 1.0 - frac)) < KINK_MARGIN:
            return False
        # the truncated kernel support jumps where 3 sigma crosses an integer
        r = trace.truncation * np.asarray(trace.sigma_cells)
        if np.min(np.abs(r - np.round(r))) < KINK_MARGIN:
            return False
    return True


def random_instance(rng: np.random.Generator, n: int, grid: GridSpec, cam: CameraModel, size_kind: str):
    """A small cloud inside the view volume plus a random pose, redrawn until kink-free."""
    path = "fast" if size_kind == "shared" else "basic"
    while True:
        pos = rng.uniform(-0.2, 0.2, (n, 3))
        scales = rng.uniform(0.15, 0.45, n)
        colors = rng.uniform(0.0, 1.0, (n, 3))
        if size_kind == "full":
            cloud = PointCloud(pos, scales, cov_diag=rng.uniform(0.04, 0.09, (n, 3)),
                               cov_rotation=random_quat(rng, n), colors=colors)
        elif size_kind == "shared":
            cloud = PointCloud(pos, scales, sigmas=rng.uniform(0.05, 0.08), colors=colors)
        else:
            cloud = PointCloud(pos, scales, sigmas=rng.uniform(0.04, 0.08, n), colors=colors)
        t = rng.uniform(-0.03, 0.03, 3) + [0.0, 0.0, cam.default_distance()]
        pose = Pose(random_quat(rng), t)
        if _kink_free(cloud, pose, cam, grid, path):
            return cloud, pose, path


def group_step(x, rel: float = FD_RELATIVE_STEP) -> float:
    """``rel`` times the root-mean-square magnitude of a parameter group."""
    x = np.asarray(x, dtype=np.float64)
    return rel * max(float(np.sqrt(np.mean(x * x))), 1e-3)


def check_case(cloud, pose, cam, grid, modality, path, rng, rel_step: float = FD_RELATIVE_STEP) -> dict[str, float]:
    """Max relative FD error of every parameter group that this configuration exposes."""
    trace_img = render_trace(cloud, pose, cam, grid, modality, path).image
    cot = rng.standard_normal(trace_img.shape)
    g = vjp_render(cloud, pose, cam, grid, modality, cot, path=path)

    def objective(make):
        def f(x):
            c, p = make(x)
            return float(np.sum(render_trace(c, p, cam, grid, modality, path).image * cot))
        return f

    out = {
        "positions": finite_diff_check(objective(lambda x: (_copy(cloud, positions=x), pose)),
                                       g.d_positions, cloud.positions, group_step(cloud.positions, rel_step)),
        "scale": finite_diff_check(objective(lambda x: (_copy(cloud, scales=x), pose)), g.d_scales, cloud.scales, group_step(cloud.scales, rel_step)),
        "rotation": finite_diff_check(objective(lambda x: (cloud, Pose(x, pose.translation))),
                                      g.d_rotation, pose.rotation, group_step(pose.rotation, rel_step)),
        "translation": finite_diff_check(objective(lambda x: (cloud, Pose(pose.rotation, x))),
                                         g.d_translation, pose.translation, group_step(pose.translation, rel_step)),
    }
    if path == "fast":
        shared = cloud.sigmas[0]
        out["sigma"] = finite_diff_check(
            objective(lambda x: (_copy(cloud, sigmas=np.full(len(cloud), x[0])), pose)),
            [g.d_shared_sigma], np.array([shared]), group_step(shared, rel_step))
    elif cloud.full_covariance:
        out["cov_diag"] = finite_diff_check(
            objective(lambda x: (_copy(cloud, cov_diag=x), pose)), g.d_cov_diag, cloud.cov_diag, group_step(cloud.cov_diag, rel_step))
        out["cov_orientation"] = finite_diff_check(
            objective(lambda x: (_copy(cloud, cov_rotation=x), pose)), g.d_cov_rotation, cloud.cov_rotation, group_step(cloud.cov_rotation, rel_step))
    else:
        out["sigma"] = finite_diff_check(objective(lambda x: (_copy(cloud, sigmas=x), pose)),
                                         g.d_sigmas, cloud.sigmas, group_step(cloud.sigmas, rel_step))
    if modality == "color":
        out["color"] = finite_diff_check(objective(lambda x: (_copy(cloud, colors=x), pose)),
                                         g.d_colors, cloud.colors, group_step(cloud.colors, rel_step))
    return {k: r.max_rel_err for k, r in out.items()}


def run_gradcheck(seed: int = 0, instances: int = 20, n_points: int = 5, dims=(16, 16, 16)) -> list[dict]:
    """Check ``instances`` random configurations, cycling over cameras, sizes and modalities.

    Every instance checks the isotropic basic path in all three modalities,
    a full-covariance silhouette and a fast-path silhouette.
    """
    rng = np.random.default_rng(seed)
    grid = GridSpec(tuple(dims))
    rows = []
    for i in range(instances):
        cam = CameraModel("ortho" if i % 2 == 0 else "persp")
        errors: dict[str, float] = {}
        cases = [("iso", m) for m in ("silhouette", "depth", "color")] + [("full", "silhouette"), ("shared", "silhouette")]
        for size_kind, modality in cases:
            cloud, pose, path = random_instance(rng, n_points, grid, cam, size_kind)
            for group, err in check_case(cloud, pose, cam, grid, modality, path, rng).items():
                errors[group] = max(errors.get(group, 0.0), err)
        rows.append({"instance": i, "camera": cam.kind, "errors": errors})
        if any(math.isnan(e) for e in errors.values()):
            raise FloatingPointError(f"NaN gradient error in instance {i}")
    return rows
