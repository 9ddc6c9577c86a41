"""
Initial per-point classifiers producing category probabilities from point features.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Protocol, Sequence, Union

import numpy as np
from scipy.special import softmax
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from src.core.exceptions import FeatureError
from src.core.models import LabelSet, ProbabilityTable, lidar_admissible
from src.lidar.features import FEATURE_COUNT, PointFeatures


logger = logging.getLogger('obstacle_fusion.lidar')


class PointClassifier(Protocol):
    """Anything that turns a feature matrix into per-label probabilities."""
    labels: LabelSet
    n_features: int

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        ...

    def to_record(self) -> Dict[str, Any]:
        ...


@dataclass
class ConstantClassifier:
    """Predicts the same distribution for every point (uniform over lidar labels by default)."""
    labels: LabelSet
    n_features: int = FEATURE_COUNT
    probabilities: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.probabilities is None:
            mask = lidar_admissible(self.labels).astype(float)
            self.probabilities = mask / mask.sum()
        self.probabilities = np.asarray(self.probabilities, dtype=float)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return np.tile(self.probabilities, (len(features), 1))

    def to_record(self) -> Dict[str, Any]:
        return {
            "kind": "constant",
            "n_features": self.n_features,
            "labels": list(self.labels.names),
            "probabilities": self.probabilities.tolist(),
        }


@dataclass
class LogisticPointClassifier:
    """
    Multinomial logistic regression on standardized features.

    The train-set mean and standard deviation are stored and re-applied at
    prediction time. Labels never seen in training get probability 0.
    """
    labels: LabelSet
    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    intercept: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        self.coef = np.asarray(self.coef, dtype=float).reshape(len(self.classes), -1)
        self.intercept = np.asarray(self.intercept, dtype=float).reshape(len(self.classes))
        self.classes = np.asarray(self.classes, dtype=np.int64)

    @property
    def n_features(self) -> int:
        return len(self.mean)

    @classmethod
    def fit(cls, features: np.ndarray, labels: Sequence[int], label_set: LabelSet,
            regularization: float = 1.0, max_iter: int = 1000) -> "LogisticPointClassifier":
        """Train on a feature matrix and label indices of ``label_set``.

        Raises:
            FeatureError: mismatched lengths or fewer than two distinct labels
        """
        features = np.asarray(features, dtype=float)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or len(features) != len(labels):
            raise FeatureError(f"Feature matrix {features.shape} does not match {len(labels)} labels")
        classes = np.unique(labels)
        if len(classes) < 2:
            raise FeatureError("Point classifier needs at least two distinct training labels")
        if classes.min() < 0 or classes.max() >= label_set.count:
            raise FeatureError("Training labels outside the label set")

        scaler = StandardScaler().fit(features)
        model = LogisticRegression(C=regularization, max_iter=max_iter)
        model.fit(scaler.transform(features), labels)

        coef, intercept = model.coef_, model.intercept_
        if len(classes) == 2:
            # sklearn keeps one row for binary problems; softmax([0, z]) reproduces it
            coef = np.vstack([np.zeros_like(coef[0]), coef[0]])
            intercept = np.array([0.0, intercept[0]])
        logger.info(f"Trained point classifier on {len(labels)} points, "
                    f"classes {[label_set.names[c] for c in classes]}")
        return cls(labels=label_set, mean=scaler.mean_, scale=scaler.scale_,
                   coef=coef, intercept=intercept, classes=model.classes_)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        standardized = (np.asarray(features, dtype=float) - self.mean) / self.scale
        scores = standardized @ self.coef.T + self.intercept
        probs = np.zeros((len(standardized), self.labels.count))
        probs[:, self.classes] = softmax(scores, axis=1)
        return probs

    def to_record(self) -> Dict[str, Any]:
        return {
            "kind": "logistic",
            "n_features": self.n_features,
            "labels": list(self.labels.names),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "classes": self.classes.tolist(),
        }


def classifier_from_record(record: Dict[str, Any]) -> Union[ConstantClassifier, LogisticPointClassifier]:
    """Rebuild a classifier from ``to_record`` output."""
    labels = LabelSet(tuple(record["labels"]))
    kind = record.get("kind")
    if kind == "constant":
        return ConstantClassifier(labels=labels, n_features=int(record["n_features"]),
                                  probabilities=np.array(record["probabilities"]))
    if kind == "logistic":
        return LogisticPointClassifier(
            labels=labels,
            mean=np.array(record["mean"]),
            scale=np.array(record["scale"]),
            coef=np.array(record["coef"]),
            intercept=np.array(record["intercept"]),
            classes=np.array(record["classes"]),
        )
    raise FeatureError(f"Unknown classifier kind '{kind}'")


def classify_points(features: Union[np.ndarray, Sequence[PointFeatures]],
                    model: PointClassifier) -> ProbabilityTable:
    """Per-point probabilities over the lidar-admissible labels (sky gets 0).

    Raises:
        FeatureError: if the feature dimension differs from the model's
    """
    if len(features) == 0:
        raise FeatureError("No points to classify")
    if isinstance(features[0], PointFeatures):
        matrix = np.vstack([pf.f for pf in features])
    else:
        matrix = np.asarray(features, dtype=float).reshape(len(features), -1)
    if matrix.shape[1] != model.n_features:
        raise FeatureError(f"Model expects {model.n_features} features, got {matrix.shape[1]}")

    probs = model.predict_proba(matrix) * lidar_admissible(model.labels)
    sums = probs.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise FeatureError("Classifier assigned no mass to any lidar label")
    return ProbabilityTable(labels=model.labels, ids=np.arange(len(matrix)), values=probs / sums)
