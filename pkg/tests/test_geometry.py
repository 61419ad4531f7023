import numpy as np
import pytest

from lidarconf.geometry import (
    CameraModel,
    PointCloud,
    RigidPose,
    outlier_oracle,
    project_points,
    project_to_depthmap,
    transform_points,
    unproject,
)

CAM = CameraModel(fx=100, fy=100, cx=64, cy=32, width=128, height=64)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_identity_pose_keeps_cloud(rng):
    cloud = PointCloud(rng.normal(size=(50, 3)), rng.uniform(size=50))
    out = transform_points(cloud, RigidPose.identity())
    np.testing.assert_array_equal(out.points, cloud.points)
    np.testing.assert_array_equal(out.intensity, cloud.intensity)


def test_translation_moves_point():
    pose = RigidPose(np.eye(3), [1.0, 0.0, 0.0])
    out = transform_points(PointCloud([[0.0, 0.0, 5.0]]), pose)
    np.testing.assert_array_equal(out.points, [[1.0, 0.0, 5.0]])


def test_pose_then_inverse_round_trip(rng):
    pose = RigidPose(random_rotation(rng), rng.normal(size=3))
    cloud = PointCloud(rng.normal(size=(200, 3)) * 10)
    back = transform_points(transform_points(cloud, pose), pose.inverse())
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-9)


def test_compose_matches_sequential(rng):
    a = RigidPose(random_rotation(rng), rng.normal(size=3))
    b = RigidPose(random_rotation(rng), rng.normal(size=3))
    cloud = PointCloud(rng.normal(size=(20, 3)))
    seq = transform_points(transform_points(cloud, a), b)
    np.testing.assert_allclose(transform_points(cloud, b.compose(a)).points, seq.points, atol=1e-12)


def test_non_orthonormal_rotation_rejected():
    with pytest.raises(ValueError):
        RigidPose(2 * np.eye(3), np.zeros(3))
    with pytest.raises(ValueError, match="determinant"):
        RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_non_finite_points_rejected():
    with pytest.raises(ValueError):
        PointCloud([[0.0, np.nan, 1.0]])
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.zeros(2))


def test_on_axis_point_lands_on_principal_point():
    d = project_to_depthmap(PointCloud([[0.0, 0.0, 10.0]]), CAM)
    assert d[32, 64] == 10.0
    assert np.count_nonzero(d) == 1


def test_lateral_point_column():
    d = project_to_depthmap(PointCloud([[1.0, 0.0, 10.0]]), CAM)
    assert d[32, 74] == 10.0


def test_keep_nearest_and_keep_last():
    cloud = PointCloud([[0.0, 0.0, 5.0], [0.0, 0.0, 9.0]])
    assert project_to_depthmap(cloud, CAM, "keep_nearest")[32, 64] == 5.0
    assert project_to_depthmap(cloud, CAM, "keep_last")[32, 64] == 9.0
    rev = PointCloud(cloud.points[::-1])
    assert project_to_depthmap(rev, CAM, "keep_nearest")[32, 64] == 5.0
    assert project_to_depthmap(rev, CAM, "keep_last")[32, 64] == 5.0


def test_points_behind_or_outside_discarded():
    cloud = PointCloud([[0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [100.0, 0.0, 1.0], [0.0, -50.0, 1.0]])
    assert not project_to_depthmap(cloud, CAM).any()


def test_empty_cloud_gives_empty_map():
    d = project_to_depthmap(PointCloud(np.zeros((0, 3))), CAM)
    assert d.shape == (64, 128) and not d.any()


def test_rounding_ties_to_even():
    # u = 0.5 + 64 = 64.5 -> 64 ; u = 1.5 + 64 -> 66
    cloud = PointCloud([[0.05, 0.0, 10.0], [0.15, 0.0, 10.0]])
    d = project_to_depthmap(cloud, CAM)
    assert d[32, 64] == 10.0 and d[32, 66] == 10.0


def test_project_unproject_round_trip(rng):
    u = rng.integers(0, CAM.width, 300)
    v = rng.integers(0, CAM.height, 300)
    z = rng.uniform(1, 50, 300)
    # one point per pixel: keep unique pixels only
    _, first = np.unique(v * CAM.width + u, return_index=True)
    u, v, z = u[first], v[first], z[first]
    jitter = rng.uniform(-0.49, 0.49, size=(2, u.size))
    pts = unproject(u + jitter[0], v + jitter[1], z, CAM)
    depth, winner = project_points(PointCloud(pts), CAM)
    assert np.array_equal(depth[v, u], z)
    back = unproject(u, v, depth[v, u], CAM)
    # half a pixel of quantization at depth z
    bound = 0.5 * z / CAM.fx + 1e-12
    assert np.all(np.abs(back[:, 0] - pts[:, 0]) <= bound)
    assert np.all(np.abs(back[:, 1] - pts[:, 1]) <= bound)
    assert np.all(winner[v, u] == np.arange(u.size))


def test_outlier_oracle_cases():
    true = np.full((4, 5), 10.0)
    proj = np.zeros((4, 5))
    proj[1, 1] = 10.0
    proj[2, 3] = 10.0
    assert not outlier_oracle(proj, true, 1.0).any()
    proj[2, 3] = 12.0
    mask = outlier_oracle(proj, true, 1.0)
    assert mask.sum() == 1 and mask[2, 3]
    true[0, 0] = 1e9
    assert not outlier_oracle(proj, true, 1.0)[0, 0]
    with pytest.raises(ValueError, match="mismatch"):
        outlier_oracle(proj, true[:3], 1.0)
