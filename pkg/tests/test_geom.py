import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffsplat.geom import (
    CameraModel,
    FullCov,
    GridSpec,
    Isotropic,
    PointCloud,
    Pose,
    camera_transform,
    covariance_from_params,
    grid_to_world,
    params_from_covariance,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_matrix_vjp,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    random_quat,
    transform_covariance,
    world_to_grid,
)

quats = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 0.1
)


def matrix_oracle(q):
    """Textbook rotation matrix written out independently of the package."""
    w, x, y, z = np.asarray(q) / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def test_quat_mul_identity_and_unit_square():
    q = np.array([0.3, -0.1, 0.5, 0.2])
    np.testing.assert_array_equal(quat_mul([1, 0, 0, 0], q), q)
    np.testing.assert_array_equal(quat_mul([0, 0, 0, 1], [0, 0, 0, 1]), [-1, 0, 0, 0])


@given(quats, quats)
def test_quat_mul_norm_is_multiplicative(a, b):
    prod = quat_mul(a, b)
    assert abs(np.linalg.norm(prod) - np.linalg.norm(a) * np.linalg.norm(b)) <= 1e-12 * np.linalg.norm(prod) + 1e-15


def test_quat_mul_composes_rotations(rng):
    for _ in range(50):
        a, b = random_quat(rng), random_quat(rng)
        v = rng.standard_normal(3)
        np.testing.assert_allclose(quat_rotate(quat_mul(a, b), v), quat_rotate(a, quat_rotate(b, v)), atol=1e-10)
        np.testing.assert_allclose(quat_to_matrix(quat_mul(a, b)), matrix_oracle(a) @ matrix_oracle(b), atol=1e-12)


def test_quat_rotate_examples():
    np.testing.assert_array_equal(quat_rotate([1, 0, 0, 0], [1, 2, 3]), [1, 2, 3])
    q = quat_from_axis_angle([0, 0, 1], math.pi / 2)
    np.testing.assert_allclose(quat_rotate(q, [1, 0, 0]), [0, 1, 0], atol=1e-15)


@given(quats, st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_quat_rotate_preserves_norm_and_matches_matrix(q, v):
    q = quat_normalize(q)
    out = quat_rotate(q, v)
    assert abs(np.linalg.norm(out) - np.linalg.norm(v)) <= 1e-10 * max(1.0, np.linalg.norm(v))
    np.testing.assert_allclose(out, matrix_oracle(q) @ np.asarray(v), atol=1e-10)


@given(quats)
def test_rotation_is_sign_invariant_bitwise(q):
    q = np.asarray(q)
    assert np.array_equal(quat_to_matrix(q), quat_to_matrix(-q))


@given(quats)
def test_normalize_gives_unit_norm(q):
    assert abs(np.sum(quat_normalize(q) ** 2) - 1.0) <= 1e-9


def test_normalize_rejects_zero():
    with pytest.raises(ValueError):
        quat_normalize([0, 0, 0, 0])


def test_quat_from_matrix_round_trip(rng):
    for _ in range(100):
        q = random_quat(rng)
        back = quat_from_matrix(quat_to_matrix(q))
        assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-12


def test_quat_matrix_vjp_matches_finite_differences(rng):
    q = random_quat(rng) * 1.7
    cot = rng.standard_normal((3, 3))
    grad = quat_matrix_vjp(q, cot)
    h = 1e-6
    num = np.zeros(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        num[i] = (np.sum(quat_to_matrix(q + e) * cot) - np.sum(quat_to_matrix(q - e) * cot)) / (2 * h)
    np.testing.assert_allclose(grad, num, atol=1e-8)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel("persp", near=2.0, far=1.0)
    with pytest.raises(ValueError):
        CameraModel("persp", focal=0.0)
    with pytest.raises(ValueError):
        CameraModel("fisheye")
    assert CameraModel("perspective").kind == "persp"


def test_grid_cell_centers():
    g = GridSpec((4, 2, 8))
    np.testing.assert_allclose(g.normalized_centers(0), [-0.5, -0.25, 0.0, 0.25])
    with pytest.raises(ValueError):
        GridSpec((0, 2, 2))


def test_origin_maps_to_grid_center_orthographic():
    grid = GridSpec((16, 8, 32))
    u, _ = world_to_grid([[0.0, 0.0, 0.0]], Pose(), CameraModel("ortho"), grid)
    np.testing.assert_array_equal(u[0], [8, 4, 16])


def test_optical_axis_maps_to_lateral_center_perspective():
    cam = CameraModel("persp")
    grid = GridSpec.cube(32)
    depth = 0.5 * (cam.near + cam.far)
    u, valid = world_to_grid([[0.0, 0.0, depth]], Pose(), cam, grid)
    assert valid[0]
    expected_depth = ((depth - cam.near) / (cam.far - cam.near)) * 32
    np.testing.assert_allclose(u[0], [16, 16, expected_depth], atol=1e-12)


def test_behind_camera_is_flagged():
    _, valid = world_to_grid([[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0, 0, 2]], Pose(), CameraModel("persp"), GridSpec.cube(8))
    assert valid.tolist() == [False, False, True]


def test_orthographic_transform_is_scaled_isometry(rng):
    grid = GridSpec.cube(20)
    pts = rng.uniform(-0.4, 0.4, (30, 3))
    pose = Pose(random_quat(rng), rng.standard_normal(3))
    u, _ = world_to_grid(pts, pose, CameraModel("ortho"), grid)
    d_world = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d_grid = np.linalg.norm(u[:, None] - u[None], axis=-1)
    np.testing.assert_allclose(d_grid, d_world * 20, atol=1e-9)


@pytest.mark.parametrize("kind", ["ortho", "persp"])
def test_world_grid_round_trip(rng, kind):
    cam = CameraModel(kind)
    pose = Pose(random_quat(rng), [0.1, -0.2, cam.default_distance()])
    pts = rng.uniform(-0.3, 0.3, (50, 3))
    grid = GridSpec((16, 24, 32))
    u, _ = world_to_grid(pts, pose, cam, grid)
    np.testing.assert_allclose(grid_to_world(u, pose, cam, grid), pts, atol=1e-10)


def test_transform_covariance_examples(rng):
    q = random_quat(rng)
    out = transform_covariance(Isotropic(1.0, 0.3), Pose(q), np.eye(3))
    np.testing.assert_allclose(out.covariance(), 0.09 * np.eye(3), atol=1e-15)

    rz = quat_from_axis_angle([0, 0, 1], math.pi / 2)
    diag = FullCov(1.0, [1.0, 2.0, 3.0], [1, 0, 0, 0])
    out = transform_covariance(diag, Pose(rz), np.eye(3))
    np.testing.assert_allclose(out.covariance(), np.diag([4.0, 1.0, 9.0]), atol=1e-12)


def test_transform_covariance_eigenvalues_match_dense_oracle(rng):
    for _ in range(20):
        a = rng.standard_normal((3, 3))
        sigma = a @ a.T + 0.1 * np.eye(3)
        diag, rot = params_from_covariance(sigma)
        jac = rng.standard_normal((3, 3))
        pose = Pose(random_quat(rng))
        out = transform_covariance(FullCov(1.0, diag, rot), pose, jac).covariance()
        full = jac @ pose.matrix() @ sigma @ pose.matrix().T @ jac.T
        np.testing.assert_allclose(np.linalg.eigvalsh(out), np.linalg.eigvalsh(full), rtol=1e-9, atol=1e-12)


def test_rotation_preserves_covariance_determinant(rng):
    a = rng.standard_normal((3, 3))
    sigma = a @ a.T + 0.1 * np.eye(3)
    diag, rot = params_from_covariance(sigma)
    out = transform_covariance(FullCov(1.0, diag, rot), Pose(random_quat(rng)), np.eye(3)).covariance()
    assert abs(np.linalg.det(out) - np.linalg.det(sigma)) <= 1e-9 * np.linalg.det(sigma)


def test_covariance_parameters_round_trip(rng):
    diag = rng.uniform(0.1, 1.0, (5, 3))
    rot = random_quat(rng, 5)
    cov = covariance_from_params(diag, rot)
    for i in range(5):
        d, r = params_from_covariance(cov[i])
        np.testing.assert_allclose(covariance_from_params(d, r), cov[i], atol=1e-12)


def test_camera_transform_sizes_orthographic_isotropic():
    grid = GridSpec((10, 20, 40))
    _, sizes, _ = camera_transform([[0, 0, 0]], np.array([0.1]), Pose(), CameraModel("ortho"), grid)
    np.testing.assert_allclose(sizes[0], [1.0, 2.0, 4.0])


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), 1.0)
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), 1.0, sigmas=0.1, cov_diag=np.ones((2, 3)))
    cloud = PointCloud(np.zeros((3, 3)), 0.5, sigmas=0.1)
    assert cloud.shared_sigma() == 0.1
    assert cloud.subset(np.array([True, False, True])).positions.shape == (2, 3)
