"""
Per-frame processing: lidar features, point classification, supervoxels,
graph construction with the previous frame attached, decoding, and the
broadcast of segment labels back to pixels and points.
"""

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Set, Tuple, TypeVar

import numpy as np

from src.core.exceptions import DataFormatError, FrameProcessingError, FusionError, LabelError
from src.core.graph import FusionGraph, build_graph
from src.core.models import (
    UNLABELED_2D,
    UNLABELED_3D,
    Edge,
    EdgeKind,
    LabelCounts,
    LabelSet,
    Modality,
    NodePayload,
    NodeRef,
    ProbabilityTable,
    lidar_admissible,
)
from src.core.weights import WeightSet
from src.crf.inference import InferenceResult, marginal_argmax_decode, max_product_decode, sum_product
from src.crf.potentials import normal_kernel, rgb_kernel
from src.crf.training import TrainingExample, fit
from src.fusion.geometry import CameraModel, crossmodal_edges, temporal_edges
from src.lidar.classifier import ConstantClassifier, LogisticPointClassifier, PointClassifier, classify_points
from src.lidar.features import PointCloud, align_ground_plane, extract_features, normal_angles
from src.pipeline.frames import FrameBundle
from src.pipeline.settings import EdgeFamilies, PipelineSettings
from src.segmentation.superpixels import broadcast_to_pixels, superpixel_adjacency, superpixel_mean_rgb
from src.segmentation.supervoxels import Clustering, Supervoxel, cluster


logger = logging.getLogger('obstacle_fusion.pipeline')

PREVIOUS_FRAME = 0
CURRENT_FRAME = 1

T = TypeVar("T")
R = TypeVar("R")


def frame_seed(seed: int, frame_id: str) -> int:
    """Per-frame seed derived from the run seed and the frame id."""
    sequence = np.random.SeedSequence([seed, zlib.crc32(frame_id.encode())])
    return int(sequence.generate_state(1)[0])


def _ordered_map(func: Callable[[T], R], items: Sequence[T], threads: int) -> List[R]:
    """Map over ``items`` with up to ``threads`` workers, keeping input order."""
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


class FrameGeometry(NamedTuple):
    aligned: PointCloud
    features: np.ndarray


@dataclass(frozen=True)
class PreparedFrame:
    """A frame with its lidar features, segments and segment evidence computed."""
    frame: FrameBundle
    geometry: FrameGeometry
    point_probs: ProbabilityTable
    clustering: Clustering
    sensor_supervoxels: List[Supervoxel]
    mean_rgb: Optional[np.ndarray]


class FrameOutput(NamedTuple):
    """Current-frame labels: one per pixel, one per point, plus the inference summary."""
    label_image: np.ndarray
    point_labels: np.ndarray
    inference: InferenceResult


def frame_geometry(frame: FrameBundle, settings: PipelineSettings) -> FrameGeometry:
    """Ground-align the cloud and compute the per-point feature matrix."""
    aligned, _ = align_ground_plane(
        frame.cloud,
        inlier_threshold_m=settings.ransac.inlier_threshold_m,
        max_ransac_iterations=settings.ransac.max_iterations,
        seed=frame_seed(settings.seed, frame.frame_id),
    )
    return FrameGeometry(aligned, extract_features(aligned, settings.neighborhood))


def frame_geometries(frames: Sequence[FrameBundle], settings: PipelineSettings) -> List[FrameGeometry]:
    """Geometry of every frame over the configured thread pool."""
    def run(frame: FrameBundle) -> FrameGeometry:
        try:
            return frame_geometry(frame, settings)
        except FusionError as e:
            raise FrameProcessingError(frame.frame_id, e) from e

    return _ordered_map(run, list(frames), settings.threads)


def prepare_frame(frame: FrameBundle, classifier: PointClassifier, settings: PipelineSettings,
                  geometry: Optional[FrameGeometry] = None) -> PreparedFrame:
    """Run the lidar and segmentation stages of one frame."""
    if frame.labels != settings.labels:
        raise LabelError(f"Frame {frame.frame_id} uses labels {list(frame.labels.names)}, "
                         f"expected {list(settings.labels.names)}")
    geometry = geometry or frame_geometry(frame, settings)
    point_probs = frame.point_probs if frame.point_probs is not None else classify_points(geometry.features, classifier)
    clustering = cluster(geometry.aligned, point_probs, settings.supervoxels,
                         normal_angles=normal_angles(geometry.features))

    # temporal association works on centroids in each frame's own sensor coordinates
    raw = frame.cloud.xyz
    sensor_supervoxels = [replace(sv, centroid=raw[sv.member_points].mean(axis=0)) for sv in clustering.supervoxels]
    mean_rgb = superpixel_mean_rgb(frame.rgb, frame.superpixel_map) if frame.rgb is not None else None
    return PreparedFrame(frame, geometry, point_probs, clustering, sensor_supervoxels, mean_rgb)


def _image_nodes(prepared: PreparedFrame, frame_no: int, settings: PipelineSettings) -> List[Tuple[NodeRef, NodePayload]]:
    heatmap = prepared.frame.heatmap
    nodes = []
    for segment_id, probs in zip(heatmap.ids, heatmap.values):
        rgb = None if prepared.mean_rgb is None else prepared.mean_rgb[segment_id]
        payload = NodePayload.from_probabilities(probs, prob_floor=settings.kernel.prob_floor, mean_rgb=rgb)
        nodes.append((NodeRef(frame_no, Modality.IMAGE_2D, int(segment_id)), payload))
    return nodes


def _lidar_nodes(prepared: PreparedFrame, frame_no: int, settings: PipelineSettings) -> List[Tuple[NodeRef, NodePayload]]:
    admissible = lidar_admissible(settings.labels)
    nodes = []
    for sv in prepared.clustering.supervoxels:
        payload = NodePayload.from_probabilities(
            sv.mean_probs, admissible, settings.kernel.prob_floor,
            centroid3d=sv.centroid, normal_angle=sv.mean_normal_angle,
        )
        nodes.append((NodeRef(frame_no, Modality.LIDAR_3D, sv.id), payload))
    return nodes


def _spatial_3d_edges(prepared: PreparedFrame, frame_no: int, settings: PipelineSettings) -> List[Edge]:
    segments = prepared.clustering.supervoxels
    edges = []
    for a, b in prepared.clustering.adjacency:
        theta_a = float(np.clip(segments[a].mean_normal_angle, 0.0, np.pi / 2))
        theta_b = float(np.clip(segments[b].mean_normal_angle, 0.0, np.pi / 2))
        edges.append(Edge(EdgeKind.SPATIAL_3D, NodeRef(frame_no, Modality.LIDAR_3D, a),
                          NodeRef(frame_no, Modality.LIDAR_3D, b),
                          normal_kernel(theta_a, theta_b, settings.kernel.sigma_3d)))
    return edges


def build_frame_graph(current: PreparedFrame, previous: Optional[PreparedFrame], camera: CameraModel,
                      settings: PipelineSettings, edges: Optional[EdgeFamilies] = None,
                      extra_hidden: Sequence[NodeRef] = ()) -> FusionGraph:
    """
    Fusion graph of the current frame, with the previous frame's lidar nodes attached.

    Previous-frame nodes only enter the graph when temporal edges are enabled
    and are always hidden.

    Args:
        current: Prepared current frame
        previous: Prepared preceding frame, if any
        camera: Camera model of the dataset
        settings: Pipeline settings
        edges: Edge families to build (default ``settings.edges``)
        extra_hidden: Further nodes to mark hidden, such as unannotated segments
    """
    families = edges or settings.edges
    kernel = settings.kernel
    nodes = _image_nodes(current, CURRENT_FRAME, settings) + _lidar_nodes(current, CURRENT_FRAME, settings)
    edge_list: List[Edge] = []
    hidden: Set[NodeRef] = set(extra_hidden)

    if families.spatial_2d:
        for a, b in superpixel_adjacency(current.frame.superpixel_map):
            k = 1.0 if current.mean_rgb is None else rgb_kernel(current.mean_rgb[a], current.mean_rgb[b], kernel.sigma_2d)
            edge_list.append(Edge(EdgeKind.SPATIAL_2D, NodeRef(CURRENT_FRAME, Modality.IMAGE_2D, a),
                                  NodeRef(CURRENT_FRAME, Modality.IMAGE_2D, b), k))
    if families.spatial_3d:
        edge_list.extend(_spatial_3d_edges(current, CURRENT_FRAME, settings))
    if families.cross_modal:
        for overlap in crossmodal_edges(current.clustering.supervoxels, current.frame.cloud.xyz,
                                        current.frame.superpixel_map, camera):
            edge_list.append(Edge(EdgeKind.CROSS_MODAL,
                                  NodeRef(CURRENT_FRAME, Modality.IMAGE_2D, overlap.superpixel_id),
                                  NodeRef(CURRENT_FRAME, Modality.LIDAR_3D, overlap.supervoxel_id),
                                  overlap.normalized_weight))

    if families.temporal and previous is not None:
        _check_gap(previous.frame, current.frame, settings)
        previous_nodes = _lidar_nodes(previous, PREVIOUS_FRAME, settings)
        nodes.extend(previous_nodes)
        hidden.update(ref for ref, _ in previous_nodes)
        if families.spatial_3d:
            edge_list.extend(_spatial_3d_edges(previous, PREVIOUS_FRAME, settings))
        for link in temporal_edges(current.sensor_supervoxels, previous.sensor_supervoxels,
                                   previous.frame.nav, current.frame.nav,
                                   gate_m=settings.fusion.temporal_gate_m, params=kernel):
            edge_list.append(Edge(EdgeKind.TEMPORAL,
                                  NodeRef(CURRENT_FRAME, Modality.LIDAR_3D, link.current_id),
                                  NodeRef(PREVIOUS_FRAME, Modality.LIDAR_3D, link.previous_id),
                                  link.kernel))

    return build_graph(settings.labels, nodes, edge_list, hidden)


def _check_gap(previous: FrameBundle, current: FrameBundle, settings: PipelineSettings) -> None:
    gap = current.timestamp - previous.timestamp
    if gap <= 0:
        raise DataFormatError(f"Previous frame {previous.frame_id} does not precede {current.frame_id}")
    expected = settings.fusion.frame_gap_s
    if abs(gap - expected) > 0.5 * expected:
        logger.warning(f"Frames {previous.frame_id} -> {current.frame_id} are {gap:.2f}s apart, "
                       f"expected about {expected:.2f}s")


def _check_weights(weights: WeightSet, labels: LabelSet) -> None:
    if weights.count != labels.count:
        raise LabelError(f"Weights cover {weights.count} labels, the pipeline uses {labels.count}")
    if weights.labels is not None and tuple(weights.labels) != labels.names:
        raise LabelError(f"Weights were trained for labels {list(weights.labels)}, "
                         f"the pipeline uses {list(labels.names)}")


def decode_prepared(current: PreparedFrame, previous: Optional[PreparedFrame], weights: WeightSet,
                    camera: CameraModel, settings: PipelineSettings,
                    edges: Optional[EdgeFamilies] = None) -> FrameOutput:
    """Build the graph of a prepared frame, decode it and broadcast the labels."""
    _check_weights(weights, settings.labels)
    graph = build_frame_graph(current, previous, camera, settings, edges)
    logger.info(f"Frame {current.frame.frame_id}: {graph.node_count} nodes, {graph.edge_count} edges")

    result = sum_product(graph, weights, settings.bp)
    if settings.decoder == "max-product":
        labeling = max_product_decode(graph, weights, settings.bp)
    else:
        labeling = marginal_argmax_decode(graph, result)

    heatmap_ids = current.frame.heatmap.ids
    superpixel_labels = np.zeros(len(heatmap_ids), dtype=np.int64)
    for segment_id in heatmap_ids:
        superpixel_labels[segment_id] = labeling[NodeRef(CURRENT_FRAME, Modality.IMAGE_2D, int(segment_id))]
    supervoxel_labels = np.array([
        labeling[NodeRef(CURRENT_FRAME, Modality.LIDAR_3D, sv.id)] for sv in current.clustering.supervoxels
    ], dtype=np.int64)

    label_image = broadcast_to_pixels(superpixel_labels, current.frame.superpixel_map)
    point_labels = supervoxel_labels[current.clustering.point_segments]
    logger.info(f"Frame {current.frame.frame_id} done (converged={result.converged}, "
                f"iterations={result.iterations_used})")
    return FrameOutput(label_image, point_labels, result)


def process_frame(current: FrameBundle, previous: Optional[FrameBundle], weights: WeightSet,
                  classifier: PointClassifier, camera: CameraModel, settings: PipelineSettings,
                  edges: Optional[EdgeFamilies] = None) -> FrameOutput:
    """
    Full pipeline for one frame.

    Raises:
        FrameProcessingError: wrapping any module error, with the frame id
    """
    logger.info(f"Processing frame {current.frame_id}")
    families = edges or settings.edges
    try:
        prepared = prepare_frame(current, classifier, settings)
        prev = prepare_frame(previous, classifier, settings) if previous is not None and families.temporal else None
        return decode_prepared(prepared, prev, weights, camera, settings, families)
    except FusionError as e:
        raise FrameProcessingError(current.frame_id, e) from e


def prepare_frames(frames: Sequence[FrameBundle], classifier: PointClassifier, settings: PipelineSettings,
                   geometries: Optional[Sequence[FrameGeometry]] = None) -> List[PreparedFrame]:
    """Prepare a sequence of frames over the configured thread pool."""
    def run(position: int) -> PreparedFrame:
        frame = frames[position]
        try:
            geometry = geometries[position] if geometries is not None else None
            return prepare_frame(frame, classifier, settings, geometry)
        except FusionError as e:
            raise FrameProcessingError(frame.frame_id, e) from e

    return _ordered_map(run, list(range(len(frames))), settings.threads)


def process_sequence(frames: Sequence[FrameBundle], weights: WeightSet, classifier: PointClassifier,
                     camera: CameraModel, settings: PipelineSettings, edges: Optional[EdgeFamilies] = None,
                     prepared: Optional[Sequence[PreparedFrame]] = None) -> List[FrameOutput]:
    """Process consecutive frames, each with its predecessor attached.

    Results are returned in input order whatever the thread count.
    """
    prepared = list(prepared) if prepared is not None else prepare_frames(frames, classifier, settings)

    def run(position: int) -> FrameOutput:
        previous = prepared[position - 1] if position > 0 else None
        try:
            return decode_prepared(prepared[position], previous, weights, camera, settings, edges)
        except FusionError as e:
            raise FrameProcessingError(frames[position].frame_id, e) from e

    return _ordered_map(run, list(range(len(frames))), settings.threads)


# ---------------------------------------------------------------------------
# training

def _vote_counts(segment_of: np.ndarray, annotation: np.ndarray, unlabeled: int,
                 segments: int, labels: LabelSet) -> np.ndarray:
    """(segments x labels) tally of annotated members per segment."""
    segment_of = np.asarray(segment_of, dtype=np.int64).ravel()
    annotation = np.asarray(annotation, dtype=np.int64).ravel()
    known = annotation != unlabeled
    if np.any((annotation[known] < 0) | (annotation[known] >= labels.count)):
        raise DataFormatError(f"Annotation ids must lie in 0..{labels.count - 1} or be {unlabeled}")
    flat = segment_of[known] * labels.count + annotation[known]
    return np.bincount(flat, minlength=segments * labels.count).reshape(segments, labels.count)


def segment_labels(prepared: PreparedFrame, labels: LabelSet) -> Dict[NodeRef, int]:
    """Majority-vote labels of the current frame's segments; unannotated segments are absent."""
    frame = prepared.frame
    observed: Dict[NodeRef, int] = {}
    if frame.annotation_2d is not None:
        counts = _vote_counts(frame.superpixel_map, frame.annotation_2d, UNLABELED_2D,
                              len(frame.heatmap), labels)
        everything = np.ones(labels.count, dtype=bool)
        for segment_id, row in enumerate(counts):
            label = LabelCounts(row).majority(everything)
            if label is not None:
                observed[NodeRef(CURRENT_FRAME, Modality.IMAGE_2D, segment_id)] = label
    if frame.annotation_3d is not None:
        counts = _vote_counts(prepared.clustering.point_segments, frame.annotation_3d, UNLABELED_3D,
                              len(prepared.clustering.supervoxels), labels)
        admissible = lidar_admissible(labels)
        for segment_id, row in enumerate(counts):
            label = LabelCounts(row).majority(admissible)
            if label is not None:
                observed[NodeRef(CURRENT_FRAME, Modality.LIDAR_3D, segment_id)] = label
    return observed


def build_training_examples(prepared: Sequence[PreparedFrame], camera: CameraModel, settings: PipelineSettings,
                            edges: Optional[EdgeFamilies] = None) -> List[TrainingExample]:
    """Training examples from consecutive annotated frames.

    Segments without annotated members become hidden, as do all
    previous-frame nodes.
    """
    examples = []
    for position, current in enumerate(prepared):
        if not current.frame.annotated:
            continue
        previous = prepared[position - 1] if position > 0 else None
        observed = segment_labels(current, settings.labels)
        current_nodes = (
            [NodeRef(CURRENT_FRAME, Modality.IMAGE_2D, int(i)) for i in current.frame.heatmap.ids]
            + [NodeRef(CURRENT_FRAME, Modality.LIDAR_3D, sv.id) for sv in current.clustering.supervoxels]
        )
        unobserved = [ref for ref in current_nodes if ref not in observed]
        try:
            graph = build_frame_graph(current, previous, camera, settings, edges, extra_hidden=unobserved)
        except FusionError as e:
            raise FrameProcessingError(current.frame.frame_id, e) from e
        examples.append(TrainingExample(graph, observed))
    return examples


def train_point_classifier(frames: Sequence[FrameBundle], geometries: Sequence[FrameGeometry],
                           settings: PipelineSettings) -> PointClassifier:
    """Fit the point classifier on every annotated lidar point of ``frames``.

    Falls back to a uniform classifier when no frame has point annotations.
    """
    admissible = lidar_admissible(settings.labels)
    features, targets = [], []
    for frame, geometry in zip(frames, geometries):
        if frame.annotation_3d is None:
            continue
        keep = frame.annotation_3d != UNLABELED_3D
        keep[keep] = admissible[frame.annotation_3d[keep]]
        features.append(geometry.features[keep])
        targets.append(frame.annotation_3d[keep])
    if not features or sum(len(t) for t in targets) == 0:
        logger.warning("No annotated lidar points, using a uniform point classifier")
        return ConstantClassifier(settings.labels)
    return LogisticPointClassifier.fit(
        np.vstack(features), np.concatenate(targets), settings.labels,
        regularization=settings.classifier.regularization, max_iter=settings.classifier.max_iter,
    )


def train_weights(sequences: Sequence[Sequence[PreparedFrame]], camera: CameraModel,
                  settings: PipelineSettings, edges: Optional[EdgeFamilies] = None) -> WeightSet:
    """Fit CRF weights on prepared frame sequences (one sequence per domain)."""
    examples: List[TrainingExample] = []
    for prepared in sequences:
        examples.extend(build_training_examples(prepared, camera, settings, edges))
    if not examples:
        raise DataFormatError("No annotated frames to train on")
    init = WeightSet.zeros(settings.labels.count, l2_lambda=settings.train.l2_lambda,
                           labels=settings.labels.names)
    return fit(examples, settings.train, settings.bp, init=init)


def train_models(sequences: Sequence[Sequence[FrameBundle]], camera: CameraModel,
                 settings: PipelineSettings, edges: Optional[EdgeFamilies] = None
                 ) -> Tuple[PointClassifier, WeightSet]:
    """Train the point classifier, then the CRF weights on top of its outputs."""
    geometries = [frame_geometries(frames, settings) for frames in sequences]
    classifier = train_point_classifier(
        [f for frames in sequences for f in frames], [g for group in geometries for g in group], settings
    )
    prepared = [prepare_frames(frames, classifier, settings, group) for frames, group in zip(sequences, geometries)]
    return classifier, train_weights(prepared, camera, settings, edges)
