"""Data models for the ObstacleFusion engine."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import LabelError


UNLABELED_2D = 255
UNLABELED_3D = -1
SKY = "sky"
GROUND = "ground"


@dataclass(frozen=True)
class LabelSet:
    """Ordered set of category names."""
    names: Tuple[str, ...]

    def __post_init__(self):
        """Validate label names."""
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise LabelError("A label set needs at least two categories")
        if len(set(self.names)) != len(self.names):
            raise LabelError(f"Label names must be unique: {list(self.names)}")

    @property
    def count(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        """Return the index of a label name."""
        try:
            return self.names.index(name)
        except ValueError:
            raise LabelError(f"Unknown label '{name}' (labels: {list(self.names)})")

    def __contains__(self, name: object) -> bool:
        return name in self.names

    def __len__(self) -> int:
        return len(self.names)


FOUR_CLASS = LabelSet(("ground", "sky", "vegetation", "object"))
BINARY = LabelSet(("ground", "non-ground"))
ANNOTATED_CLASSES = LabelSet((
    "ground", "sky", "vegetation", "building", "vehicle",
    "human", "animal", "pole", "other",
))

# Annotated categories folded into the common object class.
NINE_TO_FOUR: Dict[str, str] = {
    "ground": "ground",
    "sky": "sky",
    "vegetation": "vegetation",
    "building": "object",
    "vehicle": "object",
    "human": "object",
    "animal": "object",
    "pole": "object",
    "other": "object",
}

FOUR_TO_BINARY: Dict[str, str] = {
    "ground": "ground",
    "sky": "non-ground",
    "vegetation": "non-ground",
    "object": "non-ground",
}

LABEL_PRESETS: Dict[str, LabelSet] = {
    "four_class": FOUR_CLASS,
    "binary": BINARY,
    "annotated": ANNOTATED_CLASSES,
}

MAPPING_PRESETS: Dict[str, Dict[str, str]] = {
    "nine_to_four": NINE_TO_FOUR,
    "four_to_binary": FOUR_TO_BINARY,
}


def label_preset(name: str) -> LabelSet:
    """Look up a label set preset by name."""
    if name not in LABEL_PRESETS:
        raise LabelError(f"Unknown label preset '{name}' (known: {sorted(LABEL_PRESETS)})")
    return LABEL_PRESETS[name]


def label_index_map(source: LabelSet, target: LabelSet, mapping: Dict[str, str]) -> np.ndarray:
    """Translate label indices of ``source`` into indices of ``target``."""
    missing = [name for name in source.names if name not in mapping]
    if missing:
        raise LabelError(f"Label mapping is not total, missing: {missing}")
    return np.array([target.index(mapping[name]) for name in source.names], dtype=np.int64)


def remap_label_ids(values: np.ndarray, index_map: np.ndarray, unlabeled: int) -> np.ndarray:
    """Apply a label index map to an id array, leaving ``unlabeled`` entries alone.

    Raises:
        LabelError: an id is neither ``unlabeled`` nor a valid source index
    """
    values = np.asarray(values, dtype=np.int64)
    known = values != unlabeled
    bad = known & ((values < 0) | (values >= len(index_map)))
    if np.any(bad):
        raise LabelError(f"Label id {int(values[bad][0])} outside 0..{len(index_map) - 1}")
    out = values.copy()
    out[known] = index_map[values[known]]
    return out


def lidar_admissible(labels: LabelSet) -> np.ndarray:
    """Admissibility mask for lidar nodes: sky only exists in images."""
    mask = np.ones(labels.count, dtype=bool)
    if SKY in labels:
        mask[labels.index(SKY)] = False
    return mask


class Modality(str, Enum):
    """Sensor modality a node comes from."""
    IMAGE_2D = "2d"
    LIDAR_3D = "3d"


@dataclass(frozen=True, order=True)
class NodeRef:
    """Identifies one segment (superpixel or supervoxel) of one frame."""
    frame: int
    modality: Modality
    index: int

    def __str__(self) -> str:
        return f"{self.frame}:{self.modality.value}:{self.index}"


@dataclass(frozen=True)
class NodePayload:
    """Unary evidence and observation features attached to a node.

    ``unary_log_prob`` holds natural-log initial class probabilities, with
    ``-inf`` on inadmissible labels.
    """
    unary_log_prob: np.ndarray
    admissible: np.ndarray
    centroid3d: Optional[np.ndarray] = None
    mean_rgb: Optional[np.ndarray] = None
    normal_angle: Optional[float] = None

    def __post_init__(self):
        """Freeze arrays and check the probability invariant."""
        log_prob = np.asarray(self.unary_log_prob, dtype=float).copy()
        admissible = np.asarray(self.admissible, dtype=bool).copy()
        if log_prob.shape != admissible.shape or log_prob.ndim != 1:
            raise LabelError("unary_log_prob and admissible must be vectors of equal length")
        if not admissible.any():
            raise LabelError("A node needs at least one admissible label")
        if not np.all(np.isneginf(log_prob[~admissible])):
            raise LabelError("Inadmissible labels must carry a -inf log-probability")
        if not np.all(np.isfinite(log_prob[admissible])):
            raise LabelError("Admissible labels must carry a finite log-probability")
        total = float(np.exp(log_prob[admissible]).sum())
        if abs(total - 1.0) > 1e-6:
            raise LabelError(f"Unary probabilities sum to {total:.8f}, expected 1")
        log_prob.flags.writeable = False
        admissible.flags.writeable = False
        object.__setattr__(self, "unary_log_prob", log_prob)
        object.__setattr__(self, "admissible", admissible)
        for name in ("centroid3d", "mean_rgb"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=float).copy()
                value.flags.writeable = False
                object.__setattr__(self, name, value)

    @classmethod
    def from_probabilities(cls, probs: Sequence[float], admissible: Optional[Sequence[bool]] = None,
                           prob_floor: float = 1e-9, **features) -> "NodePayload":
        """Create a payload from raw classifier probabilities.

        Admissible probabilities are clamped at ``prob_floor`` and renormalized;
        inadmissible labels get the ``-inf`` sentinel.
        """
        probs = np.asarray(probs, dtype=float)
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise LabelError(f"Invalid probability vector: {probs}")
        mask = np.ones(probs.shape, dtype=bool) if admissible is None else np.asarray(admissible, dtype=bool)
        clamped = np.where(mask, np.maximum(probs, prob_floor), 0.0)
        clamped = clamped / clamped.sum()
        with np.errstate(divide="ignore"):
            log_prob = np.where(mask, np.log(clamped), -np.inf)
        return cls(unary_log_prob=log_prob, admissible=mask, **features)

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.unary_log_prob)


class EdgeKind(str, Enum):
    """The four pairwise edge families of the fusion graph."""
    SPATIAL_2D = "spatial_2d"
    SPATIAL_3D = "spatial_3d"
    CROSS_MODAL = "cross_modal"
    TEMPORAL = "temporal"

    @property
    def symmetric(self) -> bool:
        return self is not EdgeKind.CROSS_MODAL


@dataclass(frozen=True)
class Edge:
    """Undirected edge with its precomputed kernel value.

    For cross-modal edges ``a`` is the 2D node and ``b`` the 3D node once the
    edge has passed through ``build_graph``.
    """
    kind: EdgeKind
    a: NodeRef
    b: NodeRef
    kernel: float

    def key(self) -> Tuple[EdgeKind, NodeRef, NodeRef]:
        lo, hi = sorted((self.a, self.b))
        return (self.kind, lo, hi)


@dataclass
class ProbabilityTable:
    """Per-segment category probabilities (rows sum to one)."""
    labels: LabelSet
    ids: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        """Validate shape and normalization."""
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != self.labels.count:
            raise LabelError(
                f"Probability table must have {self.labels.count} columns, got shape {self.values.shape}"
            )
        if len(self.ids) != len(self.values):
            raise LabelError("Probability table ids and rows differ in length")
        if len(self.values) and not np.allclose(self.values.sum(axis=1), 1.0, atol=1e-6):
            raise LabelError("Probability table rows must sum to 1")

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, segment_id: int) -> np.ndarray:
        """Return the probability vector of one segment id."""
        matches = np.flatnonzero(self.ids == segment_id)
        if len(matches) == 0:
            raise LabelError(f"No probability row for id {segment_id}")
        return self.values[matches[0]]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.values, axis=1)

    @classmethod
    def from_rows(cls, labels: LabelSet, rows: Iterable[Sequence[float]],
                  ids: Optional[Sequence[int]] = None) -> "ProbabilityTable":
        """Build a table, renormalizing each row."""
        values = np.asarray(list(rows), dtype=float).reshape(-1, labels.count)
        sums = values.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            raise LabelError("Probability rows must have positive mass")
        values = values / sums
        if ids is None:
            ids = np.arange(len(values))
        return cls(labels=labels, ids=np.asarray(ids), values=values)


def mapped_labels(labels: LabelSet, mapping: Dict[str, str],
                  new_labels: Optional[LabelSet] = None) -> LabelSet:
    """Label set produced by a mapping, in first-appearance order unless given."""
    missing = [name for name in labels.names if name not in mapping]
    if missing:
        raise LabelError(f"Label mapping is not total, missing: {missing}")
    if new_labels is not None:
        unknown = sorted({mapping[name] for name in labels.names} - set(new_labels.names))
        if unknown:
            raise LabelError(f"Mapping targets not in new label set: {unknown}")
        return new_labels
    ordered: List[str] = []
    for name in labels.names:
        target = mapping[name]
        if target not in ordered:
            ordered.append(target)
    return LabelSet(tuple(ordered))


@dataclass
class LabelCounts:
    """Per-label tally used for majority votes."""
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def majority(self, admissible: np.ndarray) -> Optional[int]:
        """Most frequent admissible label, lowest index on ties; None without votes."""
        masked = np.where(admissible, self.counts, 0)
        if masked.sum() == 0:
            return None
        return int(np.argmax(masked))
