"""
Model checkpoints: WeightSet and point-classifier records as versioned YAML.
"""

import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import yaml

from src.core.exceptions import DataFormatError, FusionError
from src.core.models import LabelSet
from src.core.weights import MATRIX_FIELDS, WeightSet
from src.lidar.classifier import PointClassifier, classifier_from_record


logger = logging.getLogger('obstacle_fusion.pipeline')

FORMAT_VERSION = 1
WEIGHTS_FILE = "weights.yaml"
CLASSIFIER_FILE = "classifier.yaml"

PathLike = Union[str, Path]


def _read_record(path: PathLike, kind: str) -> Dict[str, Any]:
    try:
        with open(path, "r") as file:
            record = yaml.safe_load(file)
    except FileNotFoundError:
        raise DataFormatError(f"{kind} checkpoint not found: {path}")
    except yaml.YAMLError as e:
        raise DataFormatError(f"Invalid YAML in {kind} checkpoint {path}: {e}")
    if not isinstance(record, dict):
        raise DataFormatError(f"{kind} checkpoint {path} is not a mapping")
    version = record.get("format_version")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{kind} checkpoint {path} has format_version {version}, expected {FORMAT_VERSION}")
    return record


def _write_record(path: PathLike, record: Dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as file:
        yaml.safe_dump(record, file, sort_keys=False, default_flow_style=None)


def _check_labels(found: LabelSet, expected: Optional[LabelSet], path: PathLike) -> None:
    if expected is not None and found != expected:
        raise DataFormatError(f"Checkpoint {path} uses labels {list(found.names)}, "
                              f"expected {list(expected.names)}")


def weights_to_record(weights: WeightSet, labels: LabelSet) -> Dict[str, Any]:
    if weights.count != labels.count:
        raise DataFormatError(f"WeightSet has {weights.count} labels, label set has {labels.count}")
    record: Dict[str, Any] = {"format_version": FORMAT_VERSION, "labels": list(labels.names)}
    for name in MATRIX_FIELDS:
        record[name] = getattr(weights, name).tolist()
    record["l2_lambda"] = float(weights.l2_lambda)
    return record


def save_weights(path: PathLike, weights: WeightSet, labels: LabelSet) -> None:
    """Write a WeightSet checkpoint tagged with its label set."""
    _write_record(path, weights_to_record(weights, labels))
    logger.info(f"Saved weights for {list(labels.names)} to {path}")


def load_weights(path: PathLike, labels: Optional[LabelSet] = None) -> WeightSet:
    """
    Read a WeightSet checkpoint.

    Args:
        path: Checkpoint file
        labels: Label set the weights must have been trained on

    Raises:
        DataFormatError: missing file, wrong version, malformed matrices or a
            label set different from ``labels``
    """
    record = _read_record(path, "WeightSet")
    try:
        found = LabelSet(tuple(record["labels"]))
        matrices = {name: np.array(record[name], dtype=float) for name in MATRIX_FIELDS}
        l2_lambda = float(record.get("l2_lambda", 0.0))
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"Malformed WeightSet checkpoint {path}: {e}")
    _check_labels(found, labels, path)
    try:
        return WeightSet(l2_lambda=l2_lambda, labels=found.names, **matrices)
    except FusionError as e:
        raise DataFormatError(f"Invalid WeightSet in {path}: {e}")


def save_classifier(path: PathLike, classifier: PointClassifier) -> None:
    """Write a point-classifier checkpoint."""
    record = {"format_version": FORMAT_VERSION}
    record.update(classifier.to_record())
    _write_record(path, record)


def load_classifier(path: PathLike, labels: Optional[LabelSet] = None) -> PointClassifier:
    """
    Read a point-classifier checkpoint.

    Raises:
        DataFormatError: missing file, wrong version, unknown kind or label mismatch
    """
    record = _read_record(path, "Classifier")
    try:
        classifier = classifier_from_record(record)
    except (KeyError, TypeError, ValueError, FusionError) as e:
        raise DataFormatError(f"Malformed classifier checkpoint {path}: {e}")
    _check_labels(classifier.labels, labels, path)
    return classifier


class CheckpointManager:
    """
    Directory holding one trained model: ``weights.yaml``, ``classifier.yaml``
    and a small ``model.yaml`` describing how it was trained.
    """

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)

    @property
    def weights_path(self) -> Path:
        return self.directory / WEIGHTS_FILE

    @property
    def classifier_path(self) -> Path:
        return self.directory / CLASSIFIER_FILE

    @property
    def info_path(self) -> Path:
        return self.directory / "model.yaml"

    def exists(self) -> bool:
        return self.weights_path.exists() and self.classifier_path.exists()

    def save(self, weights: WeightSet, classifier: PointClassifier, labels: LabelSet,
             info: Optional[Dict[str, Any]] = None) -> None:
        """Write weights, classifier and the info record."""
        self.directory.mkdir(parents=True, exist_ok=True)
        save_weights(self.weights_path, weights, labels)
        save_classifier(self.classifier_path, classifier)
        record = {"format_version": FORMAT_VERSION, "labels": list(labels.names),
                  "saved_at": datetime.now().isoformat(timespec="seconds")}
        record.update(info or {})
        _write_record(self.info_path, record)

    def load(self, labels: Optional[LabelSet] = None):
        """(weights, classifier); both must match ``labels`` when given."""
        if not self.exists():
            raise DataFormatError(f"No model checkpoint in {self.directory}")
        weights = load_weights(self.weights_path, labels)
        classifier = load_classifier(self.classifier_path, labels or LabelSet(weights.labels))
        return weights, classifier

    def info(self) -> Dict[str, Any]:
        if not self.info_path.exists():
            return {}
        return _read_record(self.info_path, "Model info")
