"""
Per-pixel and per-point evaluation: confusion matrices, IoU and accuracy.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from src.core.exceptions import EvaluationError
from src.core.models import (
    MAPPING_PRESETS,
    UNLABELED_2D,
    UNLABELED_3D,
    LabelSet,
    label_index_map,
    mapped_labels,
    remap_label_ids,
)


FLOAT_DIGITS = 6


@dataclass
class ModalityMetrics:
    """Scores of one modality; ``per_label_iou`` is None for labels absent from both sides."""
    labels: LabelSet
    confusion: np.ndarray
    per_label_iou: Dict[str, Optional[float]] = field(init=False)
    mean_iou: Optional[float] = field(init=False)
    accuracy: Optional[float] = field(init=False)

    def __post_init__(self):
        """Derive the scores from the confusion matrix (rows: truth, columns: prediction)."""
        confusion = np.asarray(self.confusion, dtype=np.int64)
        self.confusion = confusion
        tp = np.diag(confusion)
        truth = confusion.sum(axis=1)
        predicted = confusion.sum(axis=0)
        union = truth + predicted - tp

        self.per_label_iou = {
            name: (float(tp[k] / union[k]) if union[k] > 0 else None)
            for k, name in enumerate(self.labels.names)
        }
        present = [self.per_label_iou[name] for k, name in enumerate(self.labels.names) if truth[k] > 0]
        self.mean_iou = float(np.mean(present)) if present else None
        total = int(confusion.sum())
        self.accuracy = float(tp.sum() / total) if total else None

    @property
    def support(self) -> int:
        return int(self.confusion.sum())

    def merged(self, other: "ModalityMetrics") -> "ModalityMetrics":
        if other.labels != self.labels:
            raise EvaluationError("Cannot merge metrics over different label sets")
        return ModalityMetrics(self.labels, self.confusion + other.confusion)

    def to_record(self) -> Dict[str, Any]:
        def rounded(value: Optional[float]) -> Optional[float]:
            return None if value is None else round(value, FLOAT_DIGITS)

        return {
            "accuracy": rounded(self.accuracy),
            "mean_iou": rounded(self.mean_iou),
            "iou": {name: rounded(v) for name, v in self.per_label_iou.items()},
            "support": self.support,
            "confusion": self.confusion.tolist(),
        }


@dataclass
class MetricsReport:
    """2D (per-pixel) and 3D (per-point) scores."""
    image: Optional[ModalityMetrics] = None
    lidar: Optional[ModalityMetrics] = None

    def merged(self, other: "MetricsReport") -> "MetricsReport":
        def merge(a, b):
            if a is None:
                return b
            return a if b is None else a.merged(b)
        return MetricsReport(merge(self.image, other.image), merge(self.lidar, other.lidar))

    def to_record(self) -> Dict[str, Any]:
        record = {}
        if self.image is not None:
            record["2d"] = self.image.to_record()
        if self.lidar is not None:
            record["3d"] = self.lidar.to_record()
        return record


def confusion_matrix(predictions: np.ndarray, annotations: np.ndarray, count: int,
                     unlabeled: int) -> np.ndarray:
    """Counts of (truth, prediction) pairs, skipping unlabeled truth."""
    predictions = np.asarray(predictions, dtype=np.int64)
    annotations = np.asarray(annotations, dtype=np.int64)
    if predictions.shape != annotations.shape:
        raise EvaluationError(f"Prediction shape {predictions.shape} differs from annotation shape {annotations.shape}")
    keep = annotations != unlabeled
    truth, guess = annotations[keep], predictions[keep]
    if np.any((truth < 0) | (truth >= count)) or np.any((guess < 0) | (guess >= count)):
        raise EvaluationError(f"Label ids must lie in 0..{count - 1}")
    return np.bincount(truth * count + guess, minlength=count * count).reshape(count, count)


def evaluate(predictions: np.ndarray, annotations: np.ndarray, labels: LabelSet,
             unlabeled: int = UNLABELED_2D) -> ModalityMetrics:
    """
    Score predictions against annotations, element by element.

    Args:
        predictions: Predicted label ids
        annotations: Ground-truth label ids, ``unlabeled`` entries ignored
        labels: Label set the ids index into
        unlabeled: Reserved ground-truth id

    Raises:
        EvaluationError: shape mismatch or ids out of range
    """
    return ModalityMetrics(labels, confusion_matrix(predictions, annotations, labels.count, unlabeled))


def map_for_evaluation(labels: LabelSet, mapping_name: Optional[str]) -> Tuple[LabelSet, Optional[np.ndarray]]:
    """Evaluation label set and index map for a mapping preset (identity when None)."""
    if mapping_name is None:
        return labels, None
    mapping = MAPPING_PRESETS[mapping_name]
    target = mapped_labels(labels, mapping)
    return target, label_index_map(labels, target, mapping)


def evaluate_frames(pairs: Iterable[Tuple[np.ndarray, np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]],
                    labels: LabelSet, mapping_name: Optional[str] = None) -> MetricsReport:
    """
    Accumulate one report over many frames.

    Args:
        pairs: ``(label_image, point_labels, annotation_2d, annotation_3d)`` per frame;
            missing annotations are skipped
        labels: Label set of predictions and annotations
        mapping_name: Optional mapping preset applied to both sides first
    """
    target, index_map = map_for_evaluation(labels, mapping_name)
    image = lidar = None
    for label_image, point_labels, annotation_2d, annotation_3d in pairs:
        if annotation_2d is not None:
            pred, truth = label_image, annotation_2d
            if index_map is not None:
                pred = remap_label_ids(pred, index_map, UNLABELED_2D)
                truth = remap_label_ids(truth, index_map, UNLABELED_2D)
            part = evaluate(pred, truth, target, UNLABELED_2D)
            image = part if image is None else image.merged(part)
        if annotation_3d is not None:
            pred, truth = point_labels, annotation_3d
            if index_map is not None:
                pred = remap_label_ids(pred, index_map, UNLABELED_3D)
                truth = remap_label_ids(truth, index_map, UNLABELED_3D)
            part = evaluate(pred, truth, target, UNLABELED_3D)
            lidar = part if lidar is None else lidar.merged(part)
    return MetricsReport(image, lidar)


def write_metrics(path: Union[str, Path], record: Dict[str, Any]) -> None:
    """Structured key-value file; sorted keys keep it byte-stable."""
    with open(path, "w") as file:
        yaml.safe_dump(record, file, sort_keys=True, default_flow_style=False)


def metrics_table(reports: Dict[str, MetricsReport]) -> pd.DataFrame:
    """One row per (name, modality) with accuracy, mean IoU and per-label IoU."""
    rows: List[Dict[str, Any]] = []
    for name, report in reports.items():
        for modality, metrics in (("2D", report.image), ("3D", report.lidar)):
            if metrics is None:
                continue
            row = {"run": name, "modality": modality,
                   "accuracy": metrics.accuracy, "mean_iou": metrics.mean_iou}
            row.update({f"iou_{k}": v for k, v in metrics.per_label_iou.items()})
            rows.append(row)
    return pd.DataFrame(rows)


def format_table(reports: Dict[str, MetricsReport]) -> str:
    table = metrics_table(reports)
    if table.empty:
        return "(no annotated data)"
    return table.to_string(index=False, float_format=lambda v: f"{v:.4f}", na_rep="-")
