"""Tests for ground alignment and point features."""

import math

import numpy as np
import pytest

from src.core.exceptions import DegenerateCloudError, FeatureError
from src.lidar.features import (
    FEATURE_NAMES,
    NeighborhoodParams,
    PointCloud,
    adaptive_radius,
    align_ground_plane,
    extract_features,
    normal_angles,
    point_features,
)


def _cloud(xyz, intensity=0.5, origin=(0.0, 0.0, 0.0)):
    xyz = np.asarray(xyz, dtype=float)
    return PointCloud(np.column_stack([xyz, np.full(len(xyz), intensity)]), np.asarray(origin))


def _grid(n=10, spacing=0.1, z=0.0, offset=(10.0, 0.0)):
    xs, ys = np.meshgrid(np.arange(n) * spacing + offset[0], np.arange(n) * spacing + offset[1])
    return np.column_stack([xs.ravel(), ys.ravel(), np.full(n * n, z)])


class TestPointCloud:
    """Test the point cloud container."""

    def test_rejects_non_finite(self):
        with pytest.raises(FeatureError, match="finite"):
            PointCloud(np.array([[0.0, np.nan, 0.0, 1.0]]))

    def test_is_read_only(self):
        cloud = _cloud([[1.0, 2.0, 3.0]])
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 5.0

    def test_transformed_moves_origin(self):
        cloud = _cloud([[1.0, 0.0, 0.0]])
        rotation = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        moved = cloud.transformed(rotation, [0.0, 0.0, 2.0])
        assert np.allclose(moved.xyz, [[0.0, 1.0, 2.0]])
        assert np.allclose(moved.sensor_origin, [0.0, 0.0, 2.0])
        assert moved.intensity[0] == 0.5


class TestAdaptiveRadius:
    """Test the range-dependent neighborhood radius."""

    def test_default_parameters(self):
        params = NeighborhoodParams()
        assert params.m_points == 60
        assert params.theta_h == pytest.approx(math.radians(0.08))

    def test_radius_at_ten_meters(self):
        assert adaptive_radius([10.0, 0.0, 3.0], NeighborhoodParams()) == pytest.approx(0.4189, abs=1e-3)

    def test_radius_grows_linearly_with_range(self):
        params = NeighborhoodParams.from_degrees(60, 0.08)
        assert adaptive_radius([20.0, 0.0, 0.0], params) == pytest.approx(2 * adaptive_radius([10.0, 0.0, 0.0], params))

    def test_radius_uses_sensor_origin(self):
        params = NeighborhoodParams()
        assert adaptive_radius([12.0, 0.0, 0.0], params, origin=[2.0, 0.0, 5.0]) == pytest.approx(
            adaptive_radius([10.0, 0.0, 0.0], params))

    def test_invalid_parameters(self):
        with pytest.raises(FeatureError):
            NeighborhoodParams(m_points=0)
        with pytest.raises(FeatureError):
            NeighborhoodParams(theta_h=0.0)


class TestGroundAlignment:
    """Test RANSAC ground alignment."""

    def test_tilted_plane_becomes_horizontal(self):
        rng = np.random.default_rng(0)
        ground = _grid(20, 0.5, offset=(0.0, 0.0))
        tilt = 0.1
        ground[:, 2] = tilt * ground[:, 0] - 1.5
        outliers = rng.uniform([0.0, 0.0, 2.0], [10.0, 10.0, 4.0], size=(20, 3))
        cloud = _cloud(np.vstack([ground, outliers]))

        aligned, plane = align_ground_plane(cloud, inlier_threshold_m=0.05, seed=3)

        assert np.abs(aligned.xyz[:len(ground), 2]).max() < 1e-6
        assert plane[2] > 0
        assert np.linalg.norm(plane[:3]) == pytest.approx(1.0)
        assert (aligned.xyz[len(ground):, 2] > 0.5).all()

    def test_deterministic_for_seed(self):
        rng = np.random.default_rng(1)
        cloud = _cloud(np.vstack([_grid(8, 0.3), rng.uniform(0, 3, size=(10, 3))]))
        first = align_ground_plane(cloud, seed=7)[1]
        second = align_ground_plane(cloud, seed=7)[1]
        assert np.array_equal(first, second)

    def test_too_few_points(self):
        with pytest.raises(DegenerateCloudError):
            align_ground_plane(_cloud([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))

    def test_collinear_points(self):
        line = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
        with pytest.raises(DegenerateCloudError, match="collinear"):
            align_ground_plane(_cloud(line), max_ransac_iterations=50)


class TestPointFeatures:
    """Test the nine-dimensional descriptor."""

    def test_feature_names(self):
        assert len(FEATURE_NAMES) == 9
        assert FEATURE_NAMES[7] == "verticality"

    def test_isolated_point(self):
        cloud = _cloud([[10.0, 0.0, 1.5], [30.0, 0.0, 0.0]], intensity=0.25)
        features = point_features(cloud, 0, NeighborhoodParams())
        assert features.height == 1.5
        assert np.allclose(features.eigenvalues, 1.0 / 3.0)
        assert features.verticality == 1.0
        assert features.intensity == 0.25
        assert features.f[3] == 0.0

    def test_flat_patch_is_horizontal(self):
        cloud = _cloud(_grid(10, 0.05))
        features = point_features(cloud, 44, NeighborhoodParams())
        assert features.eigenvalues[2] == pytest.approx(0.0, abs=1e-12)
        assert features.eigenvalues.sum() == pytest.approx(1.0)
        assert features.verticality < 1e-6
        assert features.normal_angle == pytest.approx(math.pi / 2)

    def test_vertical_pole_is_vertical(self):
        pole = np.column_stack([np.full(20, 10.0), np.zeros(20), np.linspace(0.0, 0.38, 20)])
        cloud = _cloud(pole)
        features = point_features(cloud, 10, NeighborhoodParams())
        assert features.verticality == pytest.approx(1.0)
        assert features.eigenvalues[0] == pytest.approx(1.0)
        assert features.normal_angle == pytest.approx(0.0, abs=1e-6)

    def test_height_statistics(self):
        pole = np.array([[10.0, 0.0, 0.0], [10.0, 0.0, 0.1], [10.0, 0.0, 0.2]])
        features = point_features(_cloud(pole), 1, NeighborhoodParams())
        assert features.f[1] == pytest.approx(0.0)
        assert features.f[2] == pytest.approx(0.1)
        assert features.f[3] == pytest.approx(np.var([0.0, 0.1, 0.2]))

    def test_index_out_of_range(self):
        with pytest.raises(FeatureError):
            point_features(_cloud([[1.0, 0.0, 0.0]]), 3, NeighborhoodParams())

    def test_extract_matches_single_point_features(self):
        rng = np.random.default_rng(4)
        cloud = _cloud(rng.uniform([8.0, -1.0, 0.0], [10.0, 1.0, 1.0], size=(60, 3)))
        matrix = extract_features(cloud, NeighborhoodParams())
        assert matrix.shape == (60, 9)
        for index in (0, 17, 59):
            assert np.allclose(matrix[index], point_features(cloud, index, NeighborhoodParams()).f)

    def test_threads_do_not_change_features(self):
        rng = np.random.default_rng(5)
        cloud = _cloud(rng.uniform([8.0, -1.0, 0.0], [10.0, 1.0, 1.0], size=(50, 3)))
        assert np.array_equal(extract_features(cloud, NeighborhoodParams()),
                              extract_features(cloud, NeighborhoodParams(), threads=4))

    def test_empty_cloud(self):
        with pytest.raises(FeatureError, match="empty"):
            extract_features(_cloud(np.zeros((0, 3))), NeighborhoodParams())

    def test_normal_angles_in_range(self):
        rng = np.random.default_rng(6)
        cloud = _cloud(rng.uniform([8.0, -1.0, 0.0], [10.0, 1.0, 1.0], size=(40, 3)))
        angles = normal_angles(extract_features(cloud, NeighborhoodParams()))
        assert ((angles >= 0) & (angles <= math.pi / 2)).all()
