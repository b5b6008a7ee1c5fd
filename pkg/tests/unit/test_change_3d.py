"""
三维变化区域估计测试
"""
import time

import numpy as np
import pytest

from change_3d import (
    ChangeRegion3D,
    TriangulationProblem,
    estimate_change_regions,
    group_regions,
    prune_near_camera,
    sigma_covariance,
    sigma_points,
    triangulate,
)
from errors import BehindCamera, DegenerateGeometry, NonPSD
from geometry import CameraIntrinsics, look_at, project, projection_matrix, skew
from inconsistency import ChangeRegion2D, UncertaintyModel

K = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def random_cameras(rng, point, n):
    """围绕 point 随机放置 n 个朝向它的相机"""
    cameras = []
    for _ in range(n):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        eye = point + direction * rng.uniform(2.0, 10.0)
        target = point + rng.normal(scale=0.3, size=3)
        cameras.append(projection_matrix(K, look_at(eye, target, up=rng.normal(size=3))))
    return cameras


def region_at(mean, image_index, covariance=None, area=100.0):
    covariance = np.eye(2) * 25.0 if covariance is None else np.asarray(covariance, dtype=float)
    return ChangeRegion2D(
        mean=np.asarray(mean, dtype=float),
        covariance=covariance,
        area=area,
        image_index=image_index,
        pixels=np.zeros((0, 2), dtype=np.int64),
    )


def wall_cameras():
    eyes = [[-3.0, -1.0, 0.0], [-3.0, 0.0, 0.3], [-3.0, 1.0, 0.0]]
    return {k: projection_matrix(K, look_at(eye, [0.0, 0.0, 0.0])) for k, eye in enumerate(eyes)}


class TestTriangulate:
    """DLT 三角化测试"""

    def test_orthogonal_views_of_origin(self):
        P1 = projection_matrix(K, look_at([-3.0, 0.0, 0.0], [0.0, 0.0, 0.0]))
        P2 = projection_matrix(K, look_at([0.0, -3.0, 0.0], [0.0, 0.0, 0.0]))
        result = triangulate([((320.0, 240.0), P1), ((320.0, 240.0), P2)])
        np.testing.assert_allclose(result.point, np.zeros(3), atol=1e-9)

    def test_random_configurations(self):
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        for _ in range(100):
            point = rng.uniform(-5.0, 5.0, 3)
            cameras = random_cameras(rng, point, int(rng.integers(2, 9)))
            observations = [(project(P, point)[0], P) for P in cameras]
            result = triangulate(observations)
            scale = max(1.0, float(np.linalg.norm(point)))
            assert np.linalg.norm(result.point - point) <= 1e-6 * scale
        assert time.perf_counter() - start < 1.0

    def test_zero_baseline(self):
        P = projection_matrix(K, look_at([-3.0, 0.0, 0.0], [0.0, 0.0, 0.0]))
        with pytest.raises(DegenerateGeometry):
            triangulate([((300.0, 200.0), P), ((300.0, 200.0), P)])

    def test_single_view(self):
        P = projection_matrix(K, look_at([-3.0, 0.0, 0.0], [0.0, 0.0, 0.0]))
        with pytest.raises(DegenerateGeometry):
            triangulate([((300.0, 200.0), P)])

    def test_behind_camera(self):
        cameras = wall_cameras()
        behind = np.array([-6.0, 0.2, -0.1])
        observations = []
        for P in (cameras[0], cameras[2]):
            h = P.matrix @ np.append(behind, 1.0)
            observations.append((h[:2] / h[2], P))
        with pytest.raises(BehindCamera):
            triangulate(observations)

    def test_scale_equivariance(self):
        point = np.array([0.4, -0.3, 0.2])
        eyes = [[-3.0, -1.0, 0.0], [-2.0, 2.0, 0.5], [1.0, -3.0, -0.5]]
        base = [projection_matrix(K, look_at(e, [0.0, 0.0, 0.0])) for e in eyes]
        scaled = [projection_matrix(K, look_at(np.multiply(e, 3.0), [0.0, 0.0, 0.0])) for e in eyes]
        a = triangulate([(project(P, point)[0], P) for P in base]).point
        b = triangulate([(project(P, 3.0 * point)[0], P) for P in scaled]).point
        np.testing.assert_allclose(b, 3.0 * a, atol=1e-9)

    def test_problem_matrix_blocks(self):
        """测试 A 的每块为 S(x̄)·P，权重只在求解时使用"""
        P1 = projection_matrix(K, look_at([-3.0, 0.0, 0.0], [0.0, 0.0, 0.0]))
        P2 = projection_matrix(K, look_at([0.0, -3.0, 0.0], [0.0, 0.0, 0.0]))
        problem = TriangulationProblem(np.array([[300.0, 200.0], [320.0, 240.0]]), (P1, P2))
        A = problem.matrix()
        assert A.shape == (6, 4)
        np.testing.assert_allclose(A[:3], skew(np.array([300.0, 200.0, 1.0])) @ P1.matrix)
        np.testing.assert_allclose(A[3:], skew(np.array([320.0, 240.0, 1.0])) @ P2.matrix)
        assert np.all(problem.block_weights() > 0)


class TestSigmaPoints:
    """sigma 点测试"""

    def test_zero_covariance(self):
        points = sigma_points([10.0, 20.0], np.zeros((2, 2)))
        np.testing.assert_array_equal(points, np.tile([10.0, 20.0], (5, 1)))

    def test_identity_covariance(self):
        points = sigma_points([0.0, 0.0], np.eye(2))
        r = np.sqrt(2.0)
        np.testing.assert_allclose(points, [[0, 0], [r, 0], [0, r], [-r, 0], [0, -r]], atol=1e-12)

    @pytest.mark.parametrize("method", ["cholesky", "canonical"])
    def test_moment_matching(self, method):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a = rng.normal(size=(2, 2))
            covariance = a @ a.T
            mean = rng.uniform(0, 500, 2)
            points = sigma_points(mean, covariance, method=method)
            np.testing.assert_allclose(points.mean(axis=0), mean, atol=1e-9)
            np.testing.assert_allclose(sigma_covariance(points), covariance, atol=1e-9)

    def test_canonical_is_deterministic_in_sign(self):
        covariance = np.array([[9.0, 2.0], [2.0, 4.0]])
        points = sigma_points([0.0, 0.0], covariance, method="canonical")
        major = points[1]
        assert np.abs(major).max() == major.max()
        assert np.linalg.norm(points[1]) >= np.linalg.norm(points[2])

    def test_non_psd(self):
        with pytest.raises(NonPSD):
            sigma_points([0.0, 0.0], np.diag([1.0, -1.0]))


class TestEstimateChangeRegions:
    """分组与三维估计测试"""

    def test_zero_pixel_covariance(self):
        cameras = wall_cameras()
        point = np.array([0.2, 0.1, -0.1])
        group = [region_at(project(P, point)[0], k, np.zeros((2, 2))) for k, P in cameras.items()]
        regions = estimate_change_regions([group], cameras)
        assert len(regions) == 1
        np.testing.assert_allclose(regions[0].mean, point, atol=1e-9)
        np.testing.assert_allclose(regions[0].covariance, np.zeros((3, 3)), atol=1e-9)
        assert regions[0].support == (0, 1, 2)
        assert regions[0].pixel_area == 300.0

    def test_mean_near_true_point(self):
        cameras = wall_cameras()
        point = np.array([0.0, 0.3, 0.2])
        group = [region_at(project(P, point)[0], k, np.diag([30.0, 12.0])) for k, P in cameras.items()]
        region = estimate_change_regions([group], cameras)[0]
        assert np.linalg.norm(region.mean - point) < 0.05
        assert np.all(np.linalg.eigvalsh(region.covariance) >= -1e-12)

    def test_degenerate_group_dropped(self):
        P = projection_matrix(K, look_at([-3.0, 0.0, 0.0], [0.0, 0.0, 0.0]))
        group = [region_at([320.0, 240.0], 0), region_at([320.0, 240.0], 1)]
        assert estimate_change_regions([group], {0: P, 1: P}) == []

    def test_two_changes_two_groups(self):
        cameras = wall_cameras()
        points = [np.array([0.0, -0.8, 0.2]), np.array([0.3, 0.9, -0.4])]
        regions = [region_at(project(P, X)[0], k) for X in points for k, P in cameras.items()]
        uncertainty = UncertaintyModel.isotropic(2.0)

        groups = group_regions(regions, cameras, uncertainty)
        assert len(groups) == 2
        assert all([r.image_index for r in g] == [0, 1, 2] for g in groups)

        estimates = estimate_change_regions(groups, cameras, uncertainty)
        assert len(estimates) == 2
        found = sorted(estimates, key=lambda r: r.mean[1])
        for region, truth in zip(found, points):
            assert np.linalg.norm(region.mean - truth) < 0.05

    def test_same_image_regions_not_grouped(self):
        cameras = wall_cameras()
        point = np.array([0.1, 0.0, 0.0])
        pixel = project(cameras[0], point)[0]
        regions = [region_at(pixel, 0), region_at(pixel + 1.0, 0)]
        assert group_regions(regions, cameras) == []


class TestPruneNearCamera:
    """近相机剔除测试"""

    def make_regions(self):
        poses = [look_at([-2.5, 0.0, 0.0], [4.0, 0.0, 0.0]), look_at([-2.5, 1.0, 0.0], [4.0, 1.0, 0.0])]
        artifact = ChangeRegion3D(np.array([-2.3, 0.0, 0.0]), np.eye(3) * 1e-3, (0, 1), 50.0)
        change = ChangeRegion3D(np.array([-0.5, 0.0, 0.0]), np.eye(3) * 1e-3, (0, 1), 400.0)
        return poses, artifact, change

    def test_artifact_removed(self):
        poses, artifact, change = self.make_regions()
        assert prune_near_camera([artifact, change], poses, 0.5) == [change]

    def test_zero_distance_is_identity(self):
        poses, artifact, change = self.make_regions()
        assert prune_near_camera([artifact, change], poses, 0.0) == [artifact, change]

    def test_region_at_camera_center(self):
        poses, _, _ = self.make_regions()
        at_center = ChangeRegion3D(poses[1].translation.copy(), np.eye(3), (1,), 10.0)
        assert prune_near_camera([at_center], poses, 1e-6) == []

    def test_negative_distance(self):
        poses, artifact, _ = self.make_regions()
        with pytest.raises(ValueError):
            prune_near_camera([artifact], poses, -1.0)
