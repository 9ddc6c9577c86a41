"""
Frame bundles and the on-disk dataset layout.

A dataset directory holds a YAML manifest listing the label set, the camera
calibration and the domains with their frames. Every file path in the
manifest is relative to the manifest.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from skimage import io as skio
from skimage.util import img_as_ubyte

from src.core.exceptions import DataFormatError, FusionError
from src.core.graph import FusionGraph
from src.core.models import (
    LABEL_PRESETS,
    MAPPING_PRESETS,
    UNLABELED_2D,
    UNLABELED_3D,
    LabelSet,
    ProbabilityTable,
    label_index_map,
    label_preset,
    remap_label_ids,
)
from src.fusion.geometry import CameraModel, NavSample, load_camera, load_nav_sample, save_camera, save_nav_sample
from src.lidar.features import PointCloud
from src.segmentation.superpixels import aggregate_superpixels, superpixel_count


logger = logging.getLogger('obstacle_fusion.pipeline')

PathLike = Union[str, Path]
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.yaml"


@dataclass
class FrameBundle:
    """One synchronized frame: lidar cloud, image segmentation and evidence, pose, annotations.

    ``annotation_2d`` uses 255 and ``annotation_3d`` uses -1 for unlabeled.
    """
    frame_id: str
    cloud: PointCloud
    superpixel_map: np.ndarray
    heatmap: ProbabilityTable
    nav: NavSample
    rgb: Optional[np.ndarray] = None
    annotation_2d: Optional[np.ndarray] = None
    annotation_3d: Optional[np.ndarray] = None
    point_probs: Optional[ProbabilityTable] = None

    def __post_init__(self):
        """Dimension-check the parts against each other."""
        self.superpixel_map = np.asarray(self.superpixel_map, dtype=np.int64)
        try:
            count = superpixel_count(self.superpixel_map)
        except FusionError as e:
            raise DataFormatError(f"Frame {self.frame_id}: {e}")
        if len(self.heatmap) != count or not np.array_equal(np.sort(self.heatmap.ids), np.arange(count)):
            raise DataFormatError(
                f"Frame {self.frame_id}: heatmap has {len(self.heatmap)} rows for {count} superpixels"
            )
        if self.rgb is not None:
            self.rgb = np.asarray(self.rgb)
            if self.rgb.ndim != 3 or self.rgb.shape[:2] != self.superpixel_map.shape:
                raise DataFormatError(f"Frame {self.frame_id}: RGB image {self.rgb.shape} does not match "
                                      f"superpixel map {self.superpixel_map.shape}")
        if self.annotation_2d is not None:
            self.annotation_2d = np.asarray(self.annotation_2d, dtype=np.int64)
            if self.annotation_2d.shape != self.superpixel_map.shape:
                raise DataFormatError(f"Frame {self.frame_id}: 2D annotation {self.annotation_2d.shape} does not "
                                      f"match superpixel map {self.superpixel_map.shape}")
        if self.annotation_3d is not None:
            self.annotation_3d = np.asarray(self.annotation_3d, dtype=np.int64).reshape(-1)
            if len(self.annotation_3d) != len(self.cloud):
                raise DataFormatError(f"Frame {self.frame_id}: {len(self.annotation_3d)} point labels "
                                      f"for {len(self.cloud)} points")
        if self.point_probs is not None and len(self.point_probs) != len(self.cloud):
            raise DataFormatError(f"Frame {self.frame_id}: {len(self.point_probs)} point probability rows "
                                  f"for {len(self.cloud)} points")

    @property
    def timestamp(self) -> float:
        return self.nav.timestamp

    @property
    def labels(self) -> LabelSet:
        return self.heatmap.labels

    @property
    def annotated(self) -> bool:
        """True when any pixel or point carries a label."""
        has_2d = self.annotation_2d is not None and np.any(self.annotation_2d != UNLABELED_2D)
        has_3d = self.annotation_3d is not None and np.any(self.annotation_3d != UNLABELED_3D)
        return bool(has_2d or has_3d)


@dataclass
class Dataset:
    """Frames grouped into domains, with a shared label set and camera."""
    labels: LabelSet
    camera: CameraModel
    domains: Dict[str, List[FrameBundle]]
    groups: Dict[str, str] = field(default_factory=dict)

    def group_of(self, domain: str) -> str:
        return self.groups.get(domain, domain)

    def frames(self) -> Iterator[Tuple[str, FrameBundle]]:
        for name, frames in self.domains.items():
            for frame in frames:
                yield name, frame


# ---------------------------------------------------------------------------
# file readers and writers

def read_point_cloud(path: PathLike) -> PointCloud:
    """Read ``x y z intensity`` records from text (``.txt``) or little-endian float32 (``.bin``)."""
    path = Path(path)
    try:
        if path.suffix == ".bin":
            raw = np.fromfile(path, dtype="<f4")
            if raw.size % 4:
                raise DataFormatError(f"Binary cloud {path} size is not a multiple of 4 floats")
            points = raw.reshape(-1, 4).astype(float)
        else:
            frame = pd.read_csv(path, sep=r"\s+", header=None, comment="#")
            if frame.shape[1] != 4:
                raise DataFormatError(f"Cloud {path} must have 4 columns, got {frame.shape[1]}")
            points = frame.to_numpy(dtype=float)
    except (OSError, ValueError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(f"Cannot read point cloud {path}: {e}")
    return PointCloud(points)


def write_point_cloud(path: PathLike, cloud: PointCloud) -> None:
    path = Path(path)
    if path.suffix == ".bin":
        cloud.points.astype("<f4").tofile(path)
    else:
        pd.DataFrame(cloud.points).to_csv(path, sep=" ", header=False, index=False, float_format="%.9g")


def read_label_image(path: PathLike) -> np.ndarray:
    """Single-channel integer image from PNG (or ``.npy``)."""
    path = Path(path)
    try:
        image = np.load(path) if path.suffix == ".npy" else skio.imread(path)
    except (OSError, ValueError) as e:
        raise DataFormatError(f"Cannot read label image {path}: {e}")
    image = np.asarray(image)
    if image.ndim != 2:
        raise DataFormatError(f"Label image {path} must be single-channel, got shape {image.shape}")
    return image.astype(np.int64)


def write_label_image(path: PathLike, image: np.ndarray) -> None:
    path = Path(path)
    image = np.asarray(image)
    if path.suffix == ".npy":
        np.save(path, image.astype(np.int64))
        return
    if image.min() < 0 or image.max() > np.iinfo(np.uint16).max:
        raise DataFormatError(f"Label values of {path} do not fit a PNG image")
    dtype = np.uint8 if image.max() <= np.iinfo(np.uint8).max else np.uint16
    skio.imsave(path, image.astype(dtype), check_contrast=False)


def read_rgb_image(path: PathLike) -> np.ndarray:
    try:
        image = np.asarray(skio.imread(path))
    except (OSError, ValueError) as e:
        raise DataFormatError(f"Cannot read RGB image {path}: {e}")
    if image.ndim != 3 or image.shape[2] < 3:
        raise DataFormatError(f"RGB image {path} must have 3 channels, got shape {image.shape}")
    return image[:, :, :3]


def write_rgb_image(path: PathLike, image: np.ndarray) -> None:
    skio.imsave(path, img_as_ubyte(np.asarray(image)), check_contrast=False)


def _probability_frame(path: Path, labels: LabelSet, id_column: str) -> Tuple[np.ndarray, np.ndarray]:
    try:
        frame = pd.read_csv(path)
    except (OSError, ValueError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(f"Cannot read probability table {path}: {e}")
    missing = [c for c in (id_column, *labels.names) if c not in frame.columns]
    if missing:
        raise DataFormatError(f"Probability table {path} lacks columns {missing}")
    frame = frame.sort_values(id_column)
    return frame[id_column].to_numpy(dtype=np.int64), frame[list(labels.names)].to_numpy(dtype=float)


def read_heatmap(path: PathLike, labels: LabelSet, superpixel_map: np.ndarray) -> ProbabilityTable:
    """Per-superpixel probabilities from a CSV table or a per-pixel ``.npy`` probability image."""
    path = Path(path)
    if path.suffix == ".npy":
        try:
            pixel_probs = np.load(path)
        except (OSError, ValueError) as e:
            raise DataFormatError(f"Cannot read heatmap {path}: {e}")
        return aggregate_superpixels(pixel_probs, superpixel_map, labels)
    ids, values = _probability_frame(path, labels, "superpixel_id")
    try:
        return ProbabilityTable.from_rows(labels, values, ids=ids)
    except FusionError as e:
        raise DataFormatError(f"Heatmap {path}: {e}")


def write_heatmap(path: PathLike, table: ProbabilityTable) -> None:
    frame = pd.DataFrame(table.values, columns=list(table.labels.names))
    frame.insert(0, "superpixel_id", table.ids)
    frame.to_csv(path, index=False, float_format="%.9g")


def read_point_probabilities(path: PathLike, labels: LabelSet) -> ProbabilityTable:
    ids, values = _probability_frame(Path(path), labels, "point_id")
    try:
        return ProbabilityTable.from_rows(labels, values, ids=ids)
    except FusionError as e:
        raise DataFormatError(f"Point probabilities {path}: {e}")


def write_point_probabilities(path: PathLike, table: ProbabilityTable) -> None:
    frame = pd.DataFrame(table.values, columns=list(table.labels.names))
    frame.insert(0, "point_id", table.ids)
    frame.to_csv(path, index=False, float_format="%.9g")


def read_point_labels(path: PathLike) -> np.ndarray:
    """One integer per line, -1 = unlabeled."""
    try:
        frame = pd.read_csv(path, header=None, dtype=np.int64)
    except pd.errors.EmptyDataError:
        return np.zeros(0, dtype=np.int64)
    except (OSError, ValueError) as e:
        raise DataFormatError(f"Cannot read point labels {path}: {e}")
    return frame.iloc[:, 0].to_numpy(dtype=np.int64)


def write_point_labels(path: PathLike, labels: np.ndarray) -> None:
    pd.Series(np.asarray(labels, dtype=np.int64)).to_csv(path, header=False, index=False)


def graph_tables(graph: FusionGraph) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Node and edge tables of a graph; node probabilities are the unary distributions."""
    nodes = pd.DataFrame({
        "node": [str(ref) for ref in graph.order],
        "frame": [ref.frame for ref in graph.order],
        "modality": [ref.modality.value for ref in graph.order],
        "segment": [ref.index for ref in graph.order],
        "hidden": [ref in graph.hidden for ref in graph.order],
    })
    probs = np.exp(graph.unary)
    for k, name in enumerate(graph.label_set.names):
        nodes[name] = probs[:, k]
    edges = pd.DataFrame({
        "kind": [e.kind.value for e in graph.edges],
        "a": [str(e.a) for e in graph.edges],
        "b": [str(e.b) for e in graph.edges],
        "kernel": [e.kernel for e in graph.edges],
    })
    return nodes, edges


def write_graph(directory: PathLike, graph: FusionGraph) -> Tuple[Path, Path]:
    """Write ``nodes.csv`` and ``edges.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes, edges = graph_tables(graph)
    paths = directory / "nodes.csv", directory / "edges.csv"
    nodes.to_csv(paths[0], index=False, float_format="%.9g")
    edges.to_csv(paths[1], index=False, float_format="%.9g")
    return paths


# ---------------------------------------------------------------------------
# manifest

def _labels_from(value: Any, what: str) -> LabelSet:
    if isinstance(value, str):
        return label_preset(value)
    if isinstance(value, list):
        return LabelSet(tuple(str(v) for v in value))
    raise DataFormatError(f"Manifest {what} must be a preset name or a list of names")


def _labels_to(labels: LabelSet) -> Any:
    for name, preset in LABEL_PRESETS.items():
        if preset == labels:
            return name
    return list(labels.names)


def load_frame(entry: Dict[str, Any], root: Path, labels: LabelSet,
               annotation_map: Optional[np.ndarray] = None) -> FrameBundle:
    """Load one frame entry of a manifest."""
    def ref(key: str, required: bool = True) -> Optional[Path]:
        value = entry.get(key)
        if value is None:
            if required:
                raise DataFormatError(f"Frame entry {entry.get('id')} lacks '{key}'")
            return None
        path = root / value
        if not path.exists():
            raise DataFormatError(f"Frame {entry.get('id')}: file not found: {path}")
        return path

    frame_id = str(entry.get("id", ""))
    superpixel_map = read_label_image(ref("superpixels"))
    annotation_2d = read_label_image(ref("annotation_2d", False)) if entry.get("annotation_2d") else None
    annotation_3d = read_point_labels(ref("annotation_3d", False)) if entry.get("annotation_3d") else None
    if annotation_map is not None:
        if annotation_2d is not None:
            annotation_2d = remap_label_ids(annotation_2d, annotation_map, UNLABELED_2D)
        if annotation_3d is not None:
            annotation_3d = remap_label_ids(annotation_3d, annotation_map, UNLABELED_3D)
    nav = load_nav_sample(ref("pose"))
    if "timestamp" in entry:
        nav = NavSample(nav.pose, nav.covariance_diag, float(entry["timestamp"]))

    return FrameBundle(
        frame_id=frame_id,
        cloud=read_point_cloud(ref("cloud")),
        superpixel_map=superpixel_map,
        heatmap=read_heatmap(ref("heatmap"), labels, superpixel_map),
        nav=nav,
        rgb=read_rgb_image(ref("rgb", False)) if entry.get("rgb") else None,
        annotation_2d=annotation_2d,
        annotation_3d=annotation_3d,
        point_probs=(read_point_probabilities(ref("point_probabilities", False), labels)
                     if entry.get("point_probabilities") else None),
    )


def load_dataset(path: PathLike) -> Dataset:
    """
    Load a dataset from its manifest.

    Args:
        path: Manifest file, or a directory containing ``manifest.yaml``

    Raises:
        DataFormatError: unreadable manifest, missing files or inconsistent frames
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        with open(path, "r") as file:
            manifest = yaml.safe_load(file) or {}
    except (OSError, yaml.YAMLError) as e:
        raise DataFormatError(f"Cannot read manifest {path}: {e}")
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DataFormatError(f"Unsupported manifest version {manifest.get('format_version')!r}")

    root = path.parent
    labels = _labels_from(manifest.get("labels", "four_class"), "labels")
    annotation_map = None
    if manifest.get("annotation_labels") is not None:
        source = _labels_from(manifest["annotation_labels"], "annotation_labels")
        mapping_name = manifest.get("annotation_mapping")
        if mapping_name not in MAPPING_PRESETS:
            raise DataFormatError(f"Unknown annotation mapping {mapping_name!r}")
        annotation_map = label_index_map(source, labels, MAPPING_PRESETS[mapping_name])

    if "camera" not in manifest:
        raise DataFormatError(f"Manifest {path} lacks the camera calibration")
    camera = load_camera(root / manifest["camera"])

    domains: Dict[str, List[FrameBundle]] = {}
    groups: Dict[str, str] = {}
    for domain in manifest.get("domains", []):
        name = str(domain["name"])
        if name in domains:
            raise DataFormatError(f"Duplicate domain '{name}' in manifest")
        groups[name] = str(domain.get("group", name))
        domains[name] = [load_frame(entry, root, labels, annotation_map) for entry in domain.get("frames", [])]
        for frame in domains[name]:
            if frame.superpixel_map.shape != (camera.height, camera.width):
                raise DataFormatError(f"Frame {frame.frame_id}: image size {frame.superpixel_map.shape} "
                                      f"differs from camera {camera.height}x{camera.width}")
    logger.info(f"Loaded {sum(len(f) for f in domains.values())} frames in {len(domains)} domains from {path}")
    return Dataset(labels=labels, camera=camera, domains=domains, groups=groups)


def save_dataset(directory: PathLike, dataset: Dataset, cloud_format: str = "txt") -> Path:
    """Write every frame file plus the manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_camera(directory / "camera.txt", dataset.camera)

    domain_entries = []
    for name, frames in dataset.domains.items():
        (directory / name).mkdir(exist_ok=True)
        entries = []
        for frame in frames:
            stem = f"{name}/{frame.frame_id}"
            entry = {
                "id": frame.frame_id,
                "cloud": f"{stem}_cloud.{cloud_format}",
                "superpixels": f"{stem}_superpixels.png",
                "heatmap": f"{stem}_heatmap.csv",
                "pose": f"{stem}_pose.txt",
            }
            write_point_cloud(directory / entry["cloud"], frame.cloud)
            write_label_image(directory / entry["superpixels"], frame.superpixel_map)
            write_heatmap(directory / entry["heatmap"], frame.heatmap)
            save_nav_sample(directory / entry["pose"], frame.nav)
            if frame.rgb is not None:
                entry["rgb"] = f"{stem}_rgb.png"
                write_rgb_image(directory / entry["rgb"], frame.rgb)
            if frame.annotation_2d is not None:
                entry["annotation_2d"] = f"{stem}_labels2d.png"
                write_label_image(directory / entry["annotation_2d"], frame.annotation_2d)
            if frame.annotation_3d is not None:
                entry["annotation_3d"] = f"{stem}_labels3d.txt"
                write_point_labels(directory / entry["annotation_3d"], frame.annotation_3d)
            if frame.point_probs is not None:
                entry["point_probabilities"] = f"{stem}_points.csv"
                write_point_probabilities(directory / entry["point_probabilities"], frame.point_probs)
            entries.append(entry)
        domain_entries.append({"name": name, "group": dataset.group_of(name), "frames": entries})

    manifest = {
        "format_version": MANIFEST_VERSION,
        "labels": _labels_to(dataset.labels),
        "camera": "camera.txt",
        "domains": domain_entries,
    }
    path = directory / MANIFEST_NAME
    with open(path, "w") as file:
        yaml.safe_dump(manifest, file, sort_keys=False)
    return path
