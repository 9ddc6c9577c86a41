"""
Superpixel-level aggregation of image data.

Superpixel maps are integer label images with ids ``0..S-1``; every id must
own at least one pixel.
"""

from typing import List, Tuple

import numpy as np
from skimage.util import img_as_float

from src.core.exceptions import SegmentationError
from src.core.models import LabelSet, ProbabilityTable


def _checked_map(superpixel_map: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Flattened ids and per-id pixel counts."""
    superpixel_map = np.asarray(superpixel_map)
    if superpixel_map.ndim != 2 or superpixel_map.size == 0:
        raise SegmentationError(f"Superpixel map must be a non-empty 2D image, got shape {superpixel_map.shape}")
    ids = superpixel_map.astype(np.int64).ravel()
    if ids.min() < 0:
        raise SegmentationError("Superpixel ids must be nonnegative")
    counts = np.bincount(ids)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise SegmentationError(f"Superpixel id {int(empty[0])} has no pixels")
    return ids, counts


def superpixel_count(superpixel_map: np.ndarray) -> int:
    return len(_checked_map(superpixel_map)[1])


def aggregate_superpixels(pixel_probs: np.ndarray, superpixel_map: np.ndarray,
                          labels: LabelSet) -> ProbabilityTable:
    """
    Average per-pixel probabilities within each superpixel and renormalize.

    Args:
        pixel_probs: Probability image of shape (H, W, labels)
        superpixel_map: Integer id image of shape (H, W)
        labels: Label set of the probability channels

    Returns:
        ProbabilityTable with one row per superpixel id

    Raises:
        SegmentationError: dimension mismatch or an id without pixels
    """
    pixel_probs = np.asarray(pixel_probs, dtype=float)
    superpixel_map = np.asarray(superpixel_map)
    if pixel_probs.ndim != 3 or pixel_probs.shape[:2] != superpixel_map.shape:
        raise SegmentationError(
            f"Probability image {pixel_probs.shape} does not match superpixel map {superpixel_map.shape}"
        )
    if pixel_probs.shape[2] != labels.count:
        raise SegmentationError(f"Probability image has {pixel_probs.shape[2]} channels, expected {labels.count}")

    ids, counts = _checked_map(superpixel_map)
    flat = pixel_probs.reshape(-1, labels.count)
    sums = np.column_stack([
        np.bincount(ids, weights=flat[:, k], minlength=len(counts)) for k in range(labels.count)
    ])
    means = sums / counts[:, None]
    return ProbabilityTable.from_rows(labels, means, ids=np.arange(len(counts)))


def superpixel_adjacency(superpixel_map: np.ndarray) -> List[Tuple[int, int]]:
    """4-connected neighboring superpixel pairs ``(i, j)`` with ``i < j``."""
    superpixel_map = np.asarray(superpixel_map, dtype=np.int64)
    _checked_map(superpixel_map)
    pairs = np.vstack([
        np.column_stack([superpixel_map[:, :-1].ravel(), superpixel_map[:, 1:].ravel()]),
        np.column_stack([superpixel_map[:-1, :].ravel(), superpixel_map[1:, :].ravel()]),
    ])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if len(pairs) == 0:
        return []
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    return [(int(a), int(b)) for a, b in pairs]


def superpixel_mean_rgb(image: np.ndarray, superpixel_map: np.ndarray) -> np.ndarray:
    """Mean color per superpixel with channels scaled to [0, 1]."""
    image = img_as_float(np.asarray(image))
    superpixel_map = np.asarray(superpixel_map)
    if image.ndim != 3 or image.shape[:2] != superpixel_map.shape or image.shape[2] < 3:
        raise SegmentationError(f"RGB image {image.shape} does not match superpixel map {superpixel_map.shape}")
    ids, counts = _checked_map(superpixel_map)
    flat = np.clip(image[:, :, :3].reshape(-1, 3), 0.0, 1.0)
    sums = np.column_stack([np.bincount(ids, weights=flat[:, k], minlength=len(counts)) for k in range(3)])
    return sums / counts[:, None]


def broadcast_to_pixels(values: np.ndarray, superpixel_map: np.ndarray) -> np.ndarray:
    """Per-superpixel values painted back onto the pixel grid."""
    return np.asarray(values)[np.asarray(superpixel_map, dtype=np.int64)]
