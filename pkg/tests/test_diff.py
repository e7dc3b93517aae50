import numpy as np
import pytest

from diffsplat.diff import (
    central_differences,
    finite_diff_check,
    vjp_accumulate_fast,
    vjp_clip,
    vjp_normalize_signal,
    vjp_ray_termination,
    vjp_render,
    vjp_splat_basic,
)
from diffsplat.geom import CameraModel, GridSpec, PointCloud, Pose, random_quat
from diffsplat.gradcheck import check_case, random_instance, run_gradcheck
from diffsplat.render import normalize_signal, ray_termination
from diffsplat.splat import accumulate_fast, splat_basic


def test_clip_adjoint_convention():
    out = vjp_clip(np.array([-0.1, 0.0, 0.3, 1.0, 1.4]), np.ones(5))
    np.testing.assert_array_equal(out, [0, 0, 1, 0, 0])


def test_splat_adjoint_zero_cotangent(rng):
    grid = GridSpec.cube(6)
    u = rng.uniform(0, 6, (4, 3))
    sig = np.full((4, 3), 1.0)
    for g in vjp_splat_basic(u, sig, rng.uniform(0, 0.3, 4), grid, np.zeros(grid.dims)):
        assert not np.any(g)


def test_splat_adjoint_stationary_at_mode():
    grid = GridSpec.cube(7)
    cot = np.zeros(grid.dims)
    cot[3, 3, 3] = 1.0
    d_u, _, d_s = vjp_splat_basic([[3.0, 3.0, 3.0]], [[1.2, 1.2, 1.2]], [0.5], grid, cot)
    np.testing.assert_array_equal(d_u, np.zeros((1, 3)))
    assert d_s[0] == 1.0


def test_splat_adjoint_matches_finite_differences(rng):
    grid = GridSpec.cube(8)
    u = rng.uniform(2, 6, (4, 3))
    sig = rng.uniform(0.8, 1.6, (4, 3))
    w = rng.uniform(0.05, 0.2, 4)
    cot = rng.standard_normal(grid.dims)
    d_u, d_sig, d_w = vjp_splat_basic(u, sig, w, grid, cot)
    f = lambda uu: np.sum(splat_basic(uu.reshape(4, 3), sig, w, grid) * cot)  # noqa: E731
    assert finite_diff_check(f, d_u, u, 1e-4 * 4).max_rel_err <= 1e-4
    f = lambda ss: np.sum(splat_basic(u, ss.reshape(4, 3), w, grid) * cot)  # noqa: E731
    assert finite_diff_check(f, d_sig, sig, 1e-4).max_rel_err <= 1e-4
    f = lambda ww: np.sum(splat_basic(u, sig, ww, grid) * cot)  # noqa: E731
    assert finite_diff_check(f, d_w, w, 1e-5).max_rel_err <= 1e-4


def test_fast_adjoint_matches_finite_differences(rng):
    grid = GridSpec.cube(10)
    u = np.floor(rng.uniform(2, 7, (5, 3))) + rng.uniform(0.1, 0.9, (5, 3))
    w = rng.uniform(0.1, 0.3, 5)
    sigma = np.array([1.1, 0.9, 1.25])
    cot = rng.standard_normal(grid.dims)
    d_u, d_w, d_sig = vjp_accumulate_fast(u, w, sigma, grid, cot)
    f = lambda uu: np.sum(accumulate_fast(uu.reshape(5, 3), w, sigma, grid) * cot)  # noqa: E731
    assert finite_diff_check(f, d_u, u, 1e-5).max_rel_err <= 1e-4
    f = lambda ww: np.sum(accumulate_fast(u, ww, sigma, grid) * cot)  # noqa: E731
    assert finite_diff_check(f, d_w, w, 1e-5).max_rel_err <= 1e-4
    f = lambda ss: np.sum(accumulate_fast(u, w, ss, grid) * cot)  # noqa: E731
    assert finite_diff_check(f, d_sig, sigma, 1e-6).max_rel_err <= 1e-4


def test_termination_adjoint_examples():
    g = np.zeros((1, 1, 4))
    g[..., -1] = 1.0
    np.testing.assert_array_equal(vjp_ray_termination(np.zeros((1, 1, 3)), g)[0, 0], [-1, -1, -1])
    g = np.array([[[1.0, 0.0, 0.0]]])
    np.testing.assert_array_equal(vjp_ray_termination(np.array([[[0.5, 0.5]]]), g)[0, 0], [1, 0])


def test_termination_adjoint_matches_finite_differences(rng):
    for _ in range(10):
        occ = rng.uniform(0, 1, (2, 2, 6))
        cot = rng.standard_normal((2, 2, 7))
        grad = vjp_ray_termination(occ, cot)
        f = lambda o: np.sum(ray_termination(o.reshape(occ.shape)) * cot)  # noqa: E731
        assert finite_diff_check(f, grad, occ, 1e-6).max_rel_err <= 1e-5


def test_termination_adjoint_handles_opaque_cells(rng):
    occ = rng.uniform(0, 1, (1, 1, 5))
    occ[0, 0, 2] = 1.0
    cot = rng.standard_normal((1, 1, 6))
    grad = vjp_ray_termination(occ, cot)
    assert np.all(np.isfinite(grad))
    # cells behind an opaque one see no light, so their derivative vanishes
    np.testing.assert_array_equal(grad[0, 0, 3:], 0.0)
    # one-sided difference from below for the saturated cell
    h = 1e-7
    lower = occ.copy()
    lower[0, 0, 2] -= h
    numeric = (np.sum(ray_termination(occ) * cot) - np.sum(ray_termination(lower) * cot)) / h
    assert abs(numeric - grad[0, 0, 2]) < 1e-5 * max(1.0, abs(numeric))


def test_normalize_signal_adjoint(rng):
    numer = rng.uniform(0, 1, (2, 3, 3, 3))
    denom = rng.uniform(0.5, 1.5, (3, 3, 3))
    denom[0, 0, 0] = 1e-10
    g = rng.standard_normal((3, 3, 3, 2))
    d_n, d_d = vjp_normalize_signal(numer, denom, g)
    f = lambda x: np.sum(normalize_signal(x.reshape(numer.shape), denom) * g)  # noqa: E731
    assert finite_diff_check(f, d_n, numer, 1e-6).max_rel_err <= 1e-6
    assert d_n[:, 0, 0, 0].tolist() == [0.0, 0.0] and d_d[0, 0, 0] == 0.0


def test_render_adjoint_zero_cotangent(rng):
    cloud = PointCloud(rng.uniform(-0.2, 0.2, (4, 3)), 0.4, sigmas=0.05, colors=rng.uniform(0, 1, (4, 3)))
    g = vjp_render(cloud, Pose(), CameraModel("ortho"), GridSpec.cube(12), "color", np.zeros((12, 12, 3)))
    for arr in (g.d_positions, g.d_scales, g.d_rotation, g.d_translation, g.d_sigmas, g.d_colors):
        assert not np.any(arr)


def test_symmetric_scene_has_no_lateral_translation_gradient():
    grid = GridSpec.cube(16)
    # mirror-symmetric about the plane x = 0, which maps to the image's row axis
    pts = np.array([[0.1, 0.05, 0.0], [-0.1, 0.05, 0.0], [0.0, -0.1, 0.1]])
    cloud = PointCloud(pts, 0.5, sigmas=0.06)
    cot = np.ones(grid.dims[:2])
    # row 0 has no mirror partner about the center cell
    cot[0] = 0.0
    g = vjp_render(cloud, Pose(), CameraModel("ortho"), grid, "silhouette", cot)
    assert abs(g.d_translation[0]) <= 1e-9


def test_dropped_points_get_zero_gradients(rng):
    cloud = PointCloud(rng.uniform(-0.2, 0.2, (5, 3)), 0.4, sigmas=0.05)
    mask = np.array([True, False, True, False, True])
    cot = rng.standard_normal((16, 16))
    for path in ("basic", "fast"):
        g = vjp_render(cloud, Pose(), CameraModel("ortho"), GridSpec.cube(16), "silhouette", cot,
                       path=path, dropout_mask=mask)
        assert not np.any(g.d_positions[~mask]) and not np.any(g.d_scales[~mask])
        assert np.any(g.d_positions[mask])


def test_finite_diff_check_closed_forms():
    a = np.array([0.3, -1.2, 2.5])
    rep = finite_diff_check(lambda x: float(a @ x), a, np.array([1.0, 2.0, 3.0]))
    assert rep.max_rel_err <= 1e-10
    np.testing.assert_allclose(central_differences(lambda x: float(x[0] ** 2), np.array([1.0]), 1e-5), [2.0], atol=1e-9)
    rep = finite_diff_check(lambda x: float(x[0] ** 2), [2.5], np.array([1.0]), 1e-5, tolerance=1e-4)
    assert not rep.passed and rep.worst_coordinate == 0


@pytest.mark.parametrize("kind", ["ortho", "persp"])
@pytest.mark.parametrize("case", [("iso", "silhouette"), ("iso", "depth"), ("iso", "color"),
                                  ("full", "silhouette"), ("shared", "color")])
def test_full_pipeline_gradients(rng, kind, case):
    size_kind, modality = case
    cam = CameraModel(kind)
    grid = GridSpec.cube(16)
    cloud, pose, path = random_instance(rng, 5, grid, cam, size_kind)
    errors = check_case(cloud, pose, cam, grid, modality, path, rng)
    assert max(errors.values()) <= 1e-4, errors


def test_gradcheck_runner_reports_every_group():
    rows = run_gradcheck(seed=3, instances=2)
    groups = set().union(*(r["errors"] for r in rows))
    assert groups == {"positions", "scale", "sigma", "cov_diag", "cov_orientation", "color", "rotation", "translation"}


def test_pose_gradient_is_tangent_to_the_unit_sphere(rng):
    cloud = PointCloud(rng.uniform(-0.2, 0.2, (5, 3)), 0.4, sigmas=0.05)
    q = random_quat(rng)
    g = vjp_render(cloud, Pose(q, [0, 0, 2]), CameraModel("persp"), GridSpec.cube(12), "silhouette",
                   rng.standard_normal((12, 12)))
    assert abs(g.d_rotation @ q) < 1e-12 * np.linalg.norm(g.d_rotation) + 1e-15
