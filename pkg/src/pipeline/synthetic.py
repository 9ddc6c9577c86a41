"""
Desk-scale synthetic scenes with known ground truth.

A forward-looking lidar and camera share one origin 1.5 m above a ground
plane. Boxes stand in for objects and spherical point blobs for
vegetation. The simulated classifiers err in a designed way: the camera
confuses ground with vegetation and the lidar confuses vegetation with
objects. Errors are correlated per scene element (a ground cell or an
object), so averaging over segments does not wash them out.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.core.exceptions import ConfigurationError
from src.core.models import (
    FOUR_CLASS,
    FOUR_TO_BINARY,
    LabelSet,
    ProbabilityTable,
    label_index_map,
    label_preset,
)
from src.fusion.geometry import CameraModel, NavSample, RigidTransform
from src.lidar.features import PointCloud
from src.pipeline.frames import Dataset, FrameBundle
from src.segmentation.superpixels import aggregate_superpixels


SCENARIOS = ("noiseless", "fusion-ambiguity")
LABEL_MODES = ("four_class", "binary")

SENSOR_HEIGHT_M = 1.5
# lidar x forward, y left, z up -> camera x right, y down, z forward
LIDAR_TO_CAMERA = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])

GROUND, SKY, VEGETATION, OBJECT = (FOUR_CLASS.index(n) for n in ("ground", "sky", "vegetation", "object"))
CAMERA_CONFUSES = {GROUND: VEGETATION, VEGETATION: GROUND}
LIDAR_CONFUSES = {VEGETATION: OBJECT, OBJECT: VEGETATION}

COLORS = np.array([
    [0.55, 0.45, 0.30],  # ground
    [0.60, 0.80, 1.00],  # sky
    [0.20, 0.60, 0.20],  # vegetation
    [0.70, 0.10, 0.10],  # object
])
INTENSITY = np.array([0.3, 0.0, 0.5, 0.8])


@dataclass(frozen=True)
class SceneSpec:
    """Scene descriptor; objects are placed from the seed."""
    scenario: str = "fusion-ambiguity"
    label_mode: str = "four_class"
    frames: int = 2
    confusion: float = 0.35
    pose_covariance: float = 0.0
    speed_mps: float = 1.0
    frame_gap_s: float = 2.0
    ground_roughness_m: float = 0.0
    boxes: int = 1
    blobs: int = 1
    clearance_m: float = 0.5
    ground_spacing_m: float = 0.2
    block_px: int = 10

    def __post_init__(self):
        """Validate the descriptor."""
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"Unknown scenario '{self.scenario}' (expected one of {SCENARIOS})")
        if self.label_mode not in LABEL_MODES:
            raise ConfigurationError(f"Unknown label mode '{self.label_mode}' (expected one of {LABEL_MODES})")
        if self.frames < 1:
            raise ConfigurationError("A scene needs at least one frame")
        if not 0.0 <= self.confusion <= 0.5:
            raise ConfigurationError("confusion must lie in [0, 0.5]")
        if self.pose_covariance < 0 or self.ground_roughness_m < 0:
            raise ConfigurationError("pose_covariance and ground_roughness_m must be nonnegative")

    @classmethod
    def from_config(cls, section: Dict[str, Any], **overrides) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        values = {k: v for k, v in section.items() if k in known}
        values.update(overrides)
        return cls(**values)

    @property
    def labels(self) -> LabelSet:
        return label_preset(self.label_mode)

    @property
    def noisy(self) -> bool:
        return self.scenario != "noiseless"


def synthetic_camera() -> CameraModel:
    """80x60 pinhole camera co-located with the lidar."""
    return CameraModel(fx=60.0, fy=60.0, cx=40.0, cy=30.0, width=80, height=60,
                       extrinsic=RigidTransform(LIDAR_TO_CAMERA, np.zeros(3)))


@dataclass(frozen=True)
class _Box:
    """Vertical face at ``x`` (world), spanning ``y0..y1`` and ``z0..z1`` (sensor heights)."""
    x: float
    y0: float
    y1: float
    z0: float
    z1: float


@dataclass(frozen=True)
class _Blob:
    center: np.ndarray
    radius: float


@dataclass
class _Layout:
    boxes: List[_Box] = field(default_factory=list)
    blobs: List[_Blob] = field(default_factory=list)


def _layout(spec: SceneSpec, rng: np.random.Generator) -> _Layout:
    travel = spec.speed_mps * spec.frame_gap_s * (spec.frames - 1)
    base = 5.5 + 0.5 * travel
    bottom = -SENSOR_HEIGHT_M + spec.clearance_m
    layout = _Layout()
    for i in range(spec.boxes):
        y0 = rng.uniform(0.1, 0.4) + 0.9 * i
        layout.boxes.append(_Box(x=base + rng.uniform(-0.5, 0.5), y0=y0, y1=y0 + 0.6, z0=bottom, z1=bottom + 1.0))
    for i in range(spec.blobs):
        radius = 0.4
        center = np.array([base + rng.uniform(-0.3, 0.5), -rng.uniform(0.9, 1.2) - 1.0 * i, bottom + radius])
        layout.blobs.append(_Blob(center, radius))
    return layout


def _element_keys(kind: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """One integer per scene element: ground cells by world position, objects by instance."""
    return kind * 1_000_000 + (a + 500) * 1000 + (b + 500)


def _render(camera: CameraModel, layout: _Layout, offset: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel ground truth and element key for the sensor at world x = ``offset``."""
    v, u = np.mgrid[0:camera.height, 0:camera.width].astype(float)
    xc = (u - camera.cx) / camera.fx
    yc = (v - camera.cy) / camera.fy
    direction = np.stack([np.ones_like(xc), -xc, -yc], axis=-1)

    best_t = np.full(xc.shape, np.inf)
    label = np.full(xc.shape, SKY, dtype=np.int64)
    kind = np.full(xc.shape, 3, dtype=np.int64)
    ka = np.zeros(xc.shape, dtype=np.int64)
    kb = np.zeros(xc.shape, dtype=np.int64)

    with np.errstate(divide="ignore"):
        t_ground = np.where(yc > 0, SENSOR_HEIGHT_M / yc, np.inf)
    hit = t_ground < best_t
    best_t[hit] = t_ground[hit]
    label[hit] = GROUND
    kind[hit] = 0
    ka[hit] = np.floor(t_ground[hit] + offset).astype(np.int64)
    kb[hit] = np.floor(-xc[hit] * t_ground[hit]).astype(np.int64)

    for i, box in enumerate(layout.boxes):
        t = box.x - offset
        if t <= 0:
            continue
        y, z = -xc * t, -yc * t
        hit = (y >= box.y0) & (y <= box.y1) & (z >= box.z0) & (z <= box.z1) & (t < best_t)
        best_t[hit] = t
        label[hit], kind[hit], ka[hit], kb[hit] = OBJECT, 1, i, 0

    for i, blob in enumerate(layout.blobs):
        center = blob.center - np.array([offset, 0.0, 0.0])
        a = np.sum(direction ** 2, axis=-1)
        b = -2.0 * direction @ center
        c = center @ center - blob.radius ** 2
        disc = b * b - 4 * a * c
        with np.errstate(invalid="ignore"):
            t = np.where(disc >= 0, (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a), np.inf)
        hit = (t > 0) & (t < best_t)
        best_t[hit] = t[hit]
        label[hit], kind[hit], ka[hit], kb[hit] = VEGETATION, 2, i, 0

    return label, _element_keys(kind, ka, kb)


def _sample_points(spec: SceneSpec, layout: _Layout, offset: float,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sensor-frame points with their labels and element keys; occluded ground is dropped."""
    step = spec.ground_spacing_m
    gx, gy = np.meshgrid(np.arange(4.0 + step / 2, 8.0, step), np.arange(-1.5 + step / 2, 1.5, step), indexing="ij")
    ground = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, -SENSOR_HEIGHT_M)])
    if spec.ground_roughness_m > 0:
        ground[:, 2] += rng.normal(0.0, spec.ground_roughness_m, len(ground))

    visible = np.ones(len(ground), dtype=bool)
    parts, labels, keys = [], [], []
    for i, box in enumerate(layout.boxes):
        x = box.x - offset
        ys = np.arange(box.y0, box.y1 + 1e-9, 0.1)
        zs = np.arange(box.z0, box.z1 + 1e-9, 0.1)
        fy, fz = np.meshgrid(ys, zs, indexing="ij")
        face = np.column_stack([np.full(fy.size, x), fy.ravel(), fz.ravel()])
        parts.append(face)
        labels.append(np.full(len(face), OBJECT))
        keys.append(np.full(len(face), _element_keys(1, i, 0)))
        if x > 0:
            scale = x / ground[:, 0]
            y, z = ground[:, 1] * scale, ground[:, 2] * scale
            visible &= ~((ground[:, 0] > x) & (y >= box.y0) & (y <= box.y1) & (z >= box.z0) & (z <= box.z1))
    for i, blob in enumerate(layout.blobs):
        center = blob.center - np.array([offset, 0.0, 0.0])
        direction = rng.normal(size=(80, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radii = blob.radius * np.cbrt(rng.uniform(0.0, 1.0, 80))
        points = center + direction * radii[:, None]
        parts.append(points)
        labels.append(np.full(len(points), VEGETATION))
        keys.append(np.full(len(points), _element_keys(2, i, 0)))
        t = np.clip(ground @ center / np.sum(ground ** 2, axis=1), 0.0, 1.0)
        distance = np.linalg.norm(ground * t[:, None] - center, axis=1)
        visible &= ~((distance < blob.radius) & (t < 1.0))

    ground = ground[visible]
    world_x = np.floor(ground[:, 0] + offset).astype(np.int64)
    ground_keys = _element_keys(0, world_x, np.floor(ground[:, 1]).astype(np.int64))
    xyz = np.vstack([ground] + parts)
    return (xyz, np.concatenate([np.full(len(ground), GROUND)] + labels).astype(np.int64),
            np.concatenate([ground_keys] + keys))


def _confused(truth: np.ndarray, level: np.ndarray, partner: Dict[int, int], noise: float) -> np.ndarray:
    """Probability rows moving ``level`` of the mass to the confused partner label."""
    n, count = len(truth), FOUR_CLASS.count
    probs = np.zeros((n, count))
    rows = np.arange(n)
    other = np.array([partner.get(int(t), -1) for t in truth], dtype=np.int64)
    confusable = other >= 0
    probs[rows, truth] = 1.0 - np.where(confusable, level, 0.0)
    probs[rows[confusable], other[confusable]] += level[confusable]
    return (1.0 - noise) * probs + noise / count


def _element_levels(keys: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """One confusion level per element, drawn in sorted key order."""
    unique, inverse = np.unique(keys, return_inverse=True)
    if not spec.noisy:
        return np.zeros(len(keys))
    levels = np.clip(rng.uniform(0.0, 2.0 * spec.confusion, len(unique)), 0.0, 0.9)
    return levels[inverse.reshape(-1)]


def _superpixels(truth: np.ndarray, block: int) -> np.ndarray:
    """Grid blocks split along ground-truth boundaries, renumbered 0..S-1."""
    rows, cols = np.indices(truth.shape)
    blocks = (rows // block) * (truth.shape[1] // block + 1) + cols // block
    _, ids = np.unique(blocks * FOUR_CLASS.count + truth, return_inverse=True)
    return ids.reshape(truth.shape).astype(np.int64)


def _to_binary(probs: np.ndarray) -> np.ndarray:
    index_map = label_index_map(FOUR_CLASS, label_preset("binary"), FOUR_TO_BINARY)
    out = np.zeros(probs.shape[:-1] + (2,))
    for source, target in enumerate(index_map):
        out[..., target] += probs[..., source]
    return out


def _frame(spec: SceneSpec, camera: CameraModel, layout: _Layout, index: int,
           rng: np.random.Generator) -> FrameBundle:
    offset = index * spec.speed_mps * spec.frame_gap_s
    truth_2d, pixel_keys = _render(camera, layout, offset)
    xyz, truth_3d, point_keys = _sample_points(spec, layout, offset, rng)

    noise = 0.02 if spec.noisy else 0.0
    jitter = 0.05 if spec.noisy else 0.0
    flat_truth = truth_2d.ravel()
    pixel_probs = _confused(flat_truth, _element_levels(pixel_keys.ravel(), spec, rng), CAMERA_CONFUSES, noise)
    pixel_probs += jitter * rng.random(pixel_probs.shape)
    point_probs = _confused(truth_3d, _element_levels(point_keys, spec, rng), LIDAR_CONFUSES, noise)
    point_probs += jitter * rng.random(point_probs.shape)
    point_probs[:, SKY] = 0.0
    pixel_probs /= pixel_probs.sum(axis=1, keepdims=True)
    point_probs /= point_probs.sum(axis=1, keepdims=True)

    rgb = COLORS[truth_2d] + (0.03 * rng.normal(size=truth_2d.shape + (3,)) if spec.noisy else 0.0)
    intensity = INTENSITY[truth_3d] + (0.02 * rng.normal(size=len(truth_3d)) if spec.noisy else 0.0)
    superpixel_map = _superpixels(truth_2d, spec.block_px)

    labels = spec.labels
    pixel_probs = pixel_probs.reshape(truth_2d.shape + (FOUR_CLASS.count,))
    annotation_2d, annotation_3d = truth_2d, truth_3d
    if spec.label_mode == "binary":
        index_map = label_index_map(FOUR_CLASS, labels, FOUR_TO_BINARY)
        pixel_probs, point_probs = _to_binary(pixel_probs), _to_binary(point_probs)
        annotation_2d, annotation_3d = index_map[truth_2d], index_map[truth_3d]

    nav = NavSample(
        pose=RigidTransform(np.eye(3), np.array([offset, 0.0, 0.0])),
        covariance_diag=np.full(6, spec.pose_covariance),
        timestamp=index * spec.frame_gap_s,
    )
    return FrameBundle(
        frame_id=f"{index:03d}",
        cloud=PointCloud(np.column_stack([xyz, np.clip(intensity, 0.0, 1.0)])),
        superpixel_map=superpixel_map,
        heatmap=aggregate_superpixels(pixel_probs, superpixel_map, labels),
        nav=nav,
        rgb=np.clip(rgb, 0.0, 1.0),
        annotation_2d=annotation_2d,
        annotation_3d=annotation_3d,
        point_probs=ProbabilityTable(labels=labels, ids=np.arange(len(point_probs)), values=point_probs),
    )


def generate_synthetic_scene(spec: SceneSpec, seed: int,
                             camera: Optional[CameraModel] = None) -> List[FrameBundle]:
    """
    Deterministic frame sequence of a static scene seen from a vehicle moving along +x.

    Args:
        spec: Scene descriptor
        seed: Seed of every random draw
        camera: Camera to render with (default ``synthetic_camera()``)

    Returns:
        One bundle per frame with annotations on both modalities and simulated
        classifier outputs (per-superpixel heatmap, per-point probabilities)
    """
    camera = camera or synthetic_camera()
    rng = np.random.default_rng(seed)
    layout = _layout(spec, rng)
    return [_frame(spec, camera, layout, index, rng) for index in range(spec.frames)]


def synthetic_dataset(spec: SceneSpec, seed: int, domains: int = 2,
                      groups: Optional[Dict[str, str]] = None) -> Dataset:
    """Several independently seeded scenes, one per domain."""
    camera = synthetic_camera()
    children = np.random.SeedSequence(seed).spawn(domains)
    names = [f"domain_{i}" for i in range(domains)]
    scenes = {
        name: generate_synthetic_scene(spec, int(child.generate_state(1)[0]), camera)
        for name, child in zip(names, children)
    }
    return Dataset(labels=spec.labels, camera=camera, domains=scenes, groups=dict(groups or {}))
