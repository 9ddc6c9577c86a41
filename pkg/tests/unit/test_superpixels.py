"""Tests for superpixel aggregation helpers."""

import numpy as np
import pytest

from src.core.exceptions import SegmentationError
from src.core.models import LabelSet
from src.segmentation.superpixels import (
    aggregate_superpixels,
    broadcast_to_pixels,
    superpixel_adjacency,
    superpixel_count,
    superpixel_mean_rgb,
)


LABELS = LabelSet(("ground", "object"))
SUPERPIXELS = np.array([
    [0, 0, 1],
    [2, 2, 1],
])


class TestAggregateSuperpixels:
    """Test probability aggregation."""

    def test_mean_per_superpixel(self):
        probs = np.zeros((2, 3, 2))
        probs[..., 0] = [[1.0, 0.5, 0.2], [0.0, 0.0, 0.4]]
        probs[..., 1] = 1.0 - probs[..., 0]
        table = aggregate_superpixels(probs, SUPERPIXELS, LABELS)
        assert table.ids.tolist() == [0, 1, 2]
        assert np.allclose(table.values, [[0.75, 0.25], [0.3, 0.7], [0.0, 1.0]])

    def test_shape_mismatch(self):
        with pytest.raises(SegmentationError, match="does not match"):
            aggregate_superpixels(np.full((3, 3, 2), 0.5), SUPERPIXELS, LABELS)

    def test_channel_mismatch(self):
        with pytest.raises(SegmentationError, match="channels"):
            aggregate_superpixels(np.full((2, 3, 3), 1 / 3), SUPERPIXELS, LABELS)

    def test_missing_id(self):
        with pytest.raises(SegmentationError, match="no pixels"):
            aggregate_superpixels(np.full((2, 3, 2), 0.5), np.array([[0, 0, 2], [0, 0, 2]]), LABELS)


class TestSuperpixelMaps:
    """Test map utilities."""

    def test_count(self):
        assert superpixel_count(SUPERPIXELS) == 3

    def test_negative_ids(self):
        with pytest.raises(SegmentationError):
            superpixel_count(np.array([[0, -1]]))

    def test_adjacency(self):
        assert superpixel_adjacency(SUPERPIXELS) == [(0, 1), (0, 2), (1, 2)]

    def test_single_superpixel_has_no_neighbors(self):
        assert superpixel_adjacency(np.zeros((4, 4), dtype=int)) == []

    def test_mean_rgb_of_uint8_image(self):
        image = np.zeros((2, 3, 3), dtype=np.uint8)
        image[0, :2] = 255
        rgb = superpixel_mean_rgb(image, SUPERPIXELS)
        assert rgb.shape == (3, 3)
        assert np.allclose(rgb[0], 1.0)
        assert np.allclose(rgb[2], 0.0)

    def test_mean_rgb_of_float_image(self):
        image = np.full((2, 3, 3), 0.25)
        assert np.allclose(superpixel_mean_rgb(image, SUPERPIXELS), 0.25)

    def test_mean_rgb_shape_mismatch(self):
        with pytest.raises(SegmentationError):
            superpixel_mean_rgb(np.zeros((2, 3)), SUPERPIXELS)

    def test_broadcast(self):
        painted = broadcast_to_pixels(np.array([7, 8, 9]), SUPERPIXELS)
        assert painted.tolist() == [[7, 7, 8], [9, 9, 8]]
