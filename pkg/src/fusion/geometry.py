"""
Geometry linking the two sensors and successive frames.

Cross-modal edges come from projecting supervoxel points into the camera
image and counting hits per superpixel; temporal edges come from moving
previous-frame centroids into the current frame with the navigation poses.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from src.core.exceptions import DataFormatError, FusionError
from src.crf.potentials import KernelParams, mean_nav_variance, temporal_kernel
from src.segmentation.supervoxels import Supervoxel


logger = logging.getLogger('obstacle_fusion.fusion')

PathLike = Union[str, Path]


@dataclass(frozen=True)
class RigidTransform:
    """``p -> rotation @ p + translation``."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-6):
            raise FusionError("Rotation matrix must be orthonormal")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def from_quaternion(cls, quaternion: Sequence[float], translation: Sequence[float]) -> "RigidTransform":
        """From a scalar-last quaternion ``(qx, qy, qz, qw)``."""
        return cls(Rotation.from_quat(quaternion).as_matrix(), translation)

    @property
    def quaternion(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_quat()

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with radial/tangential distortion and lidar→camera extrinsics."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    extrinsic: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        """Validate intrinsics."""
        if not (self.fx > 0 and self.fy > 0):
            raise FusionError("Focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise FusionError("Image size must be positive")


@dataclass(frozen=True)
class NavSample:
    """World←sensor pose with its 6-entry covariance diagonal."""
    pose: RigidTransform
    covariance_diag: np.ndarray = field(default_factory=lambda: np.zeros(6))
    timestamp: float = 0.0

    def __post_init__(self):
        cov = np.asarray(self.covariance_diag, dtype=float).reshape(6)
        if np.any(cov < 0):
            raise FusionError("Covariance entries must be nonnegative")
        object.__setattr__(self, "covariance_diag", cov)


@dataclass(frozen=True)
class OverlapEdge:
    superpixel_id: int
    supervoxel_id: int
    pixel_count: int
    normalized_weight: float


@dataclass(frozen=True)
class TemporalLink:
    current_id: int
    previous_id: int
    distance_m: float
    kernel: float


def project_points(points: np.ndarray, cam: CameraModel) -> Tuple[np.ndarray, np.ndarray]:
    """Project lidar-frame points to integer pixels.

    Returns:
        Tuple of ``(pixels, valid)``: pixel ``(u, v)`` per point, rounded half
        up, and a mask that is False behind the camera or outside the image
    """
    camera_frame = cam.extrinsic.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    z = camera_frame[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    x = camera_frame[:, 0] / safe_z
    y = camera_frame[:, 1] / safe_z

    r2 = x * x + y * y
    radial = 1.0 + cam.k1 * r2 + cam.k2 * r2 ** 2 + cam.k3 * r2 ** 3
    xd = x * radial + 2.0 * cam.p1 * x * y + cam.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + cam.p1 * (r2 + 2.0 * y * y) + 2.0 * cam.p2 * x * y

    u = np.floor(cam.fx * xd + cam.cx + 0.5)
    v = np.floor(cam.fy * yd + cam.cy + 0.5)
    valid = in_front & np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    pixels = np.column_stack([np.where(valid, u, -1), np.where(valid, v, -1)]).astype(np.int64)
    return pixels, valid


def crossmodal_edges(supervoxels: Sequence[Supervoxel], points: np.ndarray,
                     superpixel_map: np.ndarray, cam: CameraModel) -> List[OverlapEdge]:
    """Overlap edges between supervoxels and the superpixels their points land in.

    ``points`` are the lidar-frame coordinates the supervoxel member indices
    refer to. Each supervoxel's weights are normalized by its largest count.
    """
    superpixel_map = np.asarray(superpixel_map)
    if superpixel_map.shape != (cam.height, cam.width):
        raise DataFormatError(f"Superpixel map {superpixel_map.shape} does not match camera "
                              f"{cam.height}x{cam.width}")
    pixels, valid = project_points(points, cam)

    edges: List[OverlapEdge] = []
    for segment in supervoxels:
        members = np.asarray(segment.member_points, dtype=np.int64)
        members = members[valid[members]]
        if len(members) == 0:
            continue
        hit = superpixel_map[pixels[members, 1], pixels[members, 0]].astype(np.int64)
        ids, counts = np.unique(hit, return_counts=True)
        peak = counts.max()
        edges.extend(
            OverlapEdge(int(sp), int(segment.id), int(c), float(c / peak)) for sp, c in zip(ids, counts)
        )
    return edges


def frame_transform(nav_prev: NavSample, nav_curr: NavSample) -> RigidTransform:
    """Previous sensor frame → current sensor frame: ``pose_curr⁻¹ ∘ pose_prev``."""
    return nav_curr.pose.inverse().compose(nav_prev.pose)


def temporal_edges(current: Sequence[Supervoxel], previous: Sequence[Supervoxel],
                   nav_prev: NavSample, nav_curr: NavSample, gate_m: float = 1.0,
                   params: KernelParams = KernelParams()) -> List[TemporalLink]:
    """Link each previous supervoxel to its nearest current one within ``gate_m``.

    Centroids must be expressed in their own frame's sensor coordinates.
    """
    if not gate_m > 0:
        raise FusionError("gate_m must be positive")
    if not current or not previous:
        return []

    moved = frame_transform(nav_prev, nav_curr).apply(np.vstack([sv.centroid for sv in previous]))
    tree = cKDTree(np.vstack([sv.centroid for sv in current]))
    distances, nearest = tree.query(moved, k=1, distance_upper_bound=gate_m)
    variance = mean_nav_variance(nav_prev.covariance_diag, nav_curr.covariance_diag)

    links = []
    for prev_sv, dist, idx in zip(previous, distances, nearest):
        if not np.isfinite(dist) or dist > gate_m:
            continue
        kernel = temporal_kernel(variance, float(dist), params.sigma_nav, params.sigma_time)
        links.append(TemporalLink(int(current[idx].id), int(prev_sv.id), float(dist), kernel))
    return links


def _numbers(line: str, expected: int, what: str) -> List[float]:
    values = [float(token) for token in line.split()]
    if len(values) != expected:
        raise DataFormatError(f"{what}: expected {expected} values, got {len(values)}")
    return values


def load_camera(path: PathLike) -> CameraModel:
    """Read the five-line calibration record.

    Lines: ``fx fy cx cy`` / ``k1 k2 k3 p1 p2`` / ``width height`` /
    ``r11 ... r33`` (row-major) / ``tx ty tz``.
    """
    try:
        lines = [line for line in Path(path).read_text().splitlines() if line.strip()]
    except OSError as e:
        raise DataFormatError(f"Cannot read camera file {path}: {e}")
    if len(lines) != 5:
        raise DataFormatError(f"Camera file {path} must have 5 lines, got {len(lines)}")
    try:
        fx, fy, cx, cy = _numbers(lines[0], 4, "intrinsics")
        k1, k2, k3, p1, p2 = _numbers(lines[1], 5, "distortion")
        width, height = _numbers(lines[2], 2, "image size")
        rotation = np.array(_numbers(lines[3], 9, "rotation")).reshape(3, 3)
        translation = _numbers(lines[4], 3, "translation")
    except ValueError as e:
        raise DataFormatError(f"Malformed camera file {path}: {e}")
    return CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, width=int(width), height=int(height),
                       k1=k1, k2=k2, k3=k3, p1=p1, p2=p2,
                       extrinsic=RigidTransform(rotation, translation))


def save_camera(path: PathLike, cam: CameraModel) -> None:
    def floats(values) -> str:
        return " ".join(repr(float(v)) for v in values)

    lines = [
        floats([cam.fx, cam.fy, cam.cx, cam.cy]),
        floats([cam.k1, cam.k2, cam.k3, cam.p1, cam.p2]),
        f"{int(cam.width)} {int(cam.height)}",
        floats(cam.extrinsic.rotation.ravel()),
        floats(cam.extrinsic.translation),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_nav_sample(path: PathLike) -> NavSample:
    """Read ``timestamp tx ty tz qx qy qz qw c1 .. c6`` from one line."""
    try:
        text = Path(path).read_text()
        values = _numbers(text, 14, f"pose {path}")
    except (OSError, ValueError) as e:
        raise DataFormatError(f"Cannot read pose file {path}: {e}")
    return NavSample(
        pose=RigidTransform.from_quaternion(values[4:8], values[1:4]),
        covariance_diag=np.array(values[8:14]),
        timestamp=values[0],
    )


def save_nav_sample(path: PathLike, nav: NavSample) -> None:
    values = [nav.timestamp, *nav.pose.translation, *nav.pose.quaternion, *nav.covariance_diag]
    Path(path).write_text(" ".join(repr(float(v)) for v in values) + "\n")
