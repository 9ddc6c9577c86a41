"""
Ground alignment and per-point geometric features of lidar clouds.

Every point gets a nine-dimensional descriptor computed over an adaptive
neighborhood whose radius grows linearly with the ground distance from
the sensor, compensating the sparser sampling far away.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from src.core.exceptions import DegenerateCloudError, FeatureError


logger = logging.getLogger('obstacle_fusion.lidar')

FEATURE_NAMES = (
    "height", "min_height", "mean_height", "height_variance",
    "eigen_1", "eigen_2", "eigen_3", "verticality", "intensity",
)
FEATURE_COUNT = len(FEATURE_NAMES)
_ZERO_COVARIANCE = 1e-15


@dataclass(frozen=True)
class PointCloud:
    """Points as rows ``(x, y, z, intensity)`` plus the sensor origin."""
    points: np.ndarray
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        """Coerce arrays and validate."""
        points = np.asarray(self.points, dtype=float).reshape(-1, 4)
        origin = np.asarray(self.sensor_origin, dtype=float).reshape(3)
        if not np.all(np.isfinite(points)) or not np.all(np.isfinite(origin)):
            raise FeatureError("Point cloud coordinates must be finite")
        points.flags.writeable = False
        origin.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "sensor_origin", origin)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def transformed(self, rotation: np.ndarray, translation: Sequence[float]) -> "PointCloud":
        """Apply ``p -> R p + t`` to every point and the sensor origin."""
        rotation = np.asarray(rotation, dtype=float)
        translation = np.asarray(translation, dtype=float)
        xyz = self.xyz @ rotation.T + translation
        return PointCloud(
            points=np.column_stack([xyz, self.intensity]),
            sensor_origin=rotation @ self.sensor_origin + translation,
        )


@dataclass(frozen=True)
class NeighborhoodParams:
    """Adaptive neighborhood: ``m_points`` beams at horizontal resolution ``theta_h`` (radians)."""
    m_points: int = 60
    theta_h: float = math.radians(0.08)

    def __post_init__(self):
        """Validate ranges."""
        if self.m_points < 1:
            raise FeatureError("m_points must be at least 1")
        if not self.theta_h > 0:
            raise FeatureError("theta_h must be positive")

    @classmethod
    def from_degrees(cls, m_points: int, theta_h_deg: float) -> "NeighborhoodParams":
        return cls(m_points=m_points, theta_h=math.radians(theta_h_deg))


@dataclass(frozen=True)
class RansacParams:
    """Ground-plane RANSAC settings."""
    inlier_threshold_m: float = 0.10
    max_iterations: int = 500
    seed: int = 0

    def __post_init__(self):
        """Validate ranges."""
        if not self.inlier_threshold_m > 0:
            raise FeatureError("inlier_threshold_m must be positive")
        if self.max_iterations < 1:
            raise FeatureError("max_iterations must be positive")


@dataclass(frozen=True)
class PointFeatures:
    """Nine-dimensional point descriptor."""
    f: np.ndarray

    def __post_init__(self):
        """Coerce to a read-only 9-vector."""
        f = np.asarray(self.f, dtype=float).reshape(FEATURE_COUNT)
        f.flags.writeable = False
        object.__setattr__(self, "f", f)

    @property
    def height(self) -> float:
        return float(self.f[0])

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.f[4:7]

    @property
    def verticality(self) -> float:
        return float(self.f[7])

    @property
    def intensity(self) -> float:
        return float(self.f[8])

    @property
    def normal_angle(self) -> float:
        """Angle of the principal direction from the vertical axis, radians."""
        return math.acos(min(1.0, max(0.0, self.verticality)))


def _plane_through(sample: np.ndarray) -> Optional[Tuple[np.ndarray, float]]:
    normal = np.cross(sample[1] - sample[0], sample[2] - sample[0])
    norm = np.linalg.norm(normal)
    if norm < 1e-12:
        return None
    normal = normal / norm
    return normal, float(-normal @ sample[0])


def _refine_plane(points: np.ndarray) -> Tuple[np.ndarray, float]:
    """Least-squares plane through the inliers (smallest singular vector)."""
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid)
    normal = vt[-1]
    return normal, float(-normal @ centroid)


def _rotation_to_z(normal: np.ndarray) -> np.ndarray:
    """Shortest-arc rotation taking ``normal`` onto +z."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(normal, z)
    sin_angle = np.linalg.norm(axis)
    angle = math.atan2(sin_angle, float(normal @ z))
    if sin_angle < 1e-15:
        return np.eye(3)
    return Rotation.from_rotvec(axis / sin_angle * angle).as_matrix()


def align_ground_plane(cloud: PointCloud, inlier_threshold_m: float = 0.10,
                       max_ransac_iterations: int = 500,
                       seed: int = 0) -> Tuple[PointCloud, np.ndarray]:
    """Rotate and shift the cloud so its dominant plane becomes z = 0.

    The plane is found by RANSAC over random point triples and refined by a
    least-squares fit on its inliers.

    Args:
        cloud: Cloud in the sensor frame
        inlier_threshold_m: Point-to-plane distance counted as support
        max_ransac_iterations: Number of sampled triples
        seed: Seed of the sampling generator

    Returns:
        Tuple of the aligned cloud and the plane ``(a, b, c, d)`` in the input
        frame, unit normal with ``c >= 0``

    Raises:
        DegenerateCloudError: fewer than 3 points or no plane with 3 inliers
    """
    xyz = cloud.xyz
    if len(xyz) < 3:
        raise DegenerateCloudError(f"Need at least 3 points for a plane, got {len(xyz)}")

    rng = np.random.default_rng(seed)
    best_count = 0
    best_inliers = None
    for _ in range(max_ransac_iterations):
        sample = xyz[rng.choice(len(xyz), size=3, replace=False)]
        plane = _plane_through(sample)
        if plane is None:
            continue
        normal, d = plane
        inliers = np.abs(xyz @ normal + d) <= inlier_threshold_m
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers

    if best_inliers is None or best_count < 3:
        raise DegenerateCloudError("No plane with at least 3 supporting points (collinear or degenerate cloud)")

    normal, d = _refine_plane(xyz[best_inliers])
    if normal[2] < 0:
        normal, d = -normal, -d
    logger.debug(f"Ground plane normal {np.round(normal, 4).tolist()}, offset {d:.4f}, "
                 f"{best_count}/{len(xyz)} inliers")

    rotation = _rotation_to_z(normal)
    aligned = cloud.transformed(rotation, (0.0, 0.0, d))
    return aligned, np.array([normal[0], normal[1], normal[2], d])


def adaptive_radius(point: Sequence[float], params: NeighborhoodParams,
                    origin: Optional[Sequence[float]] = None) -> float:
    """Neighborhood radius ``2 ||p||_xy sin(M theta_H / 4)``.

    ``||p||_xy`` is the horizontal distance from ``origin`` (default: the
    coordinate origin).
    """
    point = np.asarray(point, dtype=float)
    offset = point[:2] if origin is None else point[:2] - np.asarray(origin, dtype=float)[:2]
    distance = float(np.hypot(offset[0], offset[1]))
    return 2.0 * distance * math.sin(params.m_points * params.theta_h / 4.0)


def _neighborhood_features(cloud: PointCloud, index: int, neighbors: Sequence[int]) -> np.ndarray:
    xyz = cloud.xyz
    members = np.union1d(np.asarray(neighbors, dtype=np.int64), [index])
    local = xyz[members]
    heights = local[:, 2]

    if len(local) > 1:
        covariance = np.cov(local, rowvar=False, bias=True)
    else:
        covariance = np.zeros((3, 3))
    values, vectors = np.linalg.eigh(covariance)
    values = np.clip(values, 0.0, None)
    total = values.sum()
    if total <= _ZERO_COVARIANCE:
        eigen = np.full(3, 1.0 / 3.0)
        verticality = 1.0
    else:
        eigen = values[::-1] / total
        verticality = min(1.0, abs(float(vectors[2, -1])))

    return np.array([
        xyz[index, 2],
        heights.min(),
        heights.mean(),
        heights.var(),
        eigen[0], eigen[1], eigen[2],
        verticality,
        cloud.intensity[index],
    ])


def point_features(cloud: PointCloud, index: int, params: NeighborhoodParams,
                   tree: Optional[cKDTree] = None) -> PointFeatures:
    """Features of one point over its adaptive neighborhood.

    Raises:
        FeatureError: invalid index
    """
    if not (0 <= index < len(cloud)):
        raise FeatureError(f"Point index {index} outside cloud of {len(cloud)} points")
    tree = tree or cKDTree(cloud.xyz)
    radius = adaptive_radius(cloud.xyz[index], params, cloud.sensor_origin)
    neighbors = tree.query_ball_point(cloud.xyz[index], radius)
    return PointFeatures(_neighborhood_features(cloud, index, neighbors))


def extract_features(cloud: PointCloud, params: NeighborhoodParams, threads: int = 1) -> np.ndarray:
    """Feature matrix (points x 9) for the whole cloud against one spatial index."""
    if len(cloud) == 0:
        raise FeatureError("Cannot extract features from an empty cloud")
    tree = cKDTree(cloud.xyz)
    origin = cloud.sensor_origin
    factor = 2.0 * math.sin(params.m_points * params.theta_h / 4.0)
    radii = factor * np.hypot(cloud.xyz[:, 0] - origin[0], cloud.xyz[:, 1] - origin[1])
    neighborhoods = tree.query_ball_point(cloud.xyz, radii)

    def compute(indices: range) -> np.ndarray:
        return np.array([_neighborhood_features(cloud, i, neighborhoods[i]) for i in indices])

    if threads <= 1 or len(cloud) < 2 * threads:
        features = compute(range(len(cloud)))
    else:
        bounds = np.linspace(0, len(cloud), threads + 1).astype(int)
        chunks = [range(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            features = np.vstack(list(pool.map(compute, chunks)))
    logger.debug(f"Extracted features for {len(cloud)} points")
    return features


def normal_angles(features: np.ndarray) -> np.ndarray:
    """Per-point angle ``arccos(f8)`` in [0, pi/2]."""
    features = np.asarray(features, dtype=float)
    return np.arccos(np.clip(features[:, 7], 0.0, 1.0))
