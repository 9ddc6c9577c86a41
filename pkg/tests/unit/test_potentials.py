"""Tests for unary and pairwise potentials and the Gibbs energy."""

import math

import numpy as np
import pytest

from src.core.exceptions import LabelError, PotentialError
from src.core.graph import build_graph
from src.core.models import Edge, EdgeKind, LabelSet, Modality, NodePayload, NodeRef
from src.core.weights import MATRIX_FIELDS, WeightSet
from src.crf.inference import exact_enumerate
from src.crf.potentials import (
    KernelParams,
    edge_cost_tables,
    mean_nav_variance,
    normal_kernel,
    pairwise_cost,
    rgb_kernel,
    temporal_kernel,
    total_energy,
    unary_cost,
)
from tests.graph_factory import random_graph, uniform_weights


def _weights(count, **matrices):
    values = {n: np.zeros((count, count)) for n in MATRIX_FIELDS}
    values.update({k: np.asarray(v, dtype=float) for k, v in matrices.items()})
    return WeightSet(**values)


A2 = NodeRef(1, Modality.IMAGE_2D, 0)
B2 = NodeRef(1, Modality.IMAGE_2D, 1)
C3 = NodeRef(1, Modality.LIDAR_3D, 0)


class TestUnaryCost:
    """Test the unary cost."""

    def test_certainty_costs_nothing(self):
        assert unary_cost(1.0) == 0.0

    def test_half(self):
        assert unary_cost(0.5) == pytest.approx(0.6931, abs=1e-4)

    def test_zero_is_clamped(self):
        assert unary_cost(0.0, prob_floor=1e-9) == pytest.approx(20.723, abs=1e-3)

    def test_out_of_range(self):
        with pytest.raises(PotentialError):
            unary_cost(1.5)


class TestKernels:
    """Test the four edge kernels."""

    def test_rgb_identical(self):
        assert rgb_kernel([0.2, 0.4, 0.6], [0.2, 0.4, 0.6], 0.5) == 1.0

    def test_rgb_unit_distance(self):
        assert rgb_kernel([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.5) == pytest.approx(0.1353, abs=1e-4)

    def test_rgb_black_white(self):
        assert rgb_kernel([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.5) == pytest.approx(0.00248, abs=1e-5)

    def test_rgb_range(self):
        with pytest.raises(PotentialError):
            rgb_kernel([0.0, 0.0, 255.0], [0.0, 0.0, 0.0], 0.5)

    def test_normal_equal(self):
        assert normal_kernel(0.7, 0.7, 0.5) == 1.0

    def test_normal_flat_vs_vertical(self):
        assert normal_kernel(0.0, math.pi / 2, 0.5) == pytest.approx(0.00720, abs=1e-5)

    def test_normal_close_angles(self):
        assert normal_kernel(0.2, 0.3, 0.5) == pytest.approx(0.9802, abs=1e-4)

    def test_normal_angle_domain(self):
        with pytest.raises(PotentialError):
            normal_kernel(-0.1, 0.0, 0.5)

    def test_temporal_perfect(self):
        assert temporal_kernel(0.0, 0.0, 1.0, 1 / math.sqrt(8)) == 1.0

    def test_temporal_half_meter(self):
        assert temporal_kernel(0.0, 0.5, 1.0, 1 / math.sqrt(8)) == pytest.approx(0.3679, abs=1e-4)

    def test_temporal_untrusted_localization(self):
        assert temporal_kernel(50.0, 0.0, 1.0, 1 / math.sqrt(8)) < 2e-11

    def test_temporal_decreasing_in_distance(self):
        values = [temporal_kernel(0.1, d, 1.0, 0.35) for d in (0.0, 0.1, 0.5, 1.0)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_mean_nav_variance(self):
        assert mean_nav_variance([1.0] * 6, [3.0] * 6) == 2.0

    def test_kernel_params_validation(self):
        with pytest.raises(PotentialError):
            KernelParams(sigma_2d=0.0)
        with pytest.raises(PotentialError):
            KernelParams(prob_floor=0.01)


class TestPairwiseCost:
    """Test pairwise costs."""

    def test_equal_labels_cost_nothing(self):
        weights = _weights(2, w2d=[[0, 5.0], [5.0, 0]], b2d=[[0, 1.0], [1.0, 0]])
        edge = Edge(EdgeKind.SPATIAL_2D, A2, B2, 0.8)
        assert pairwise_cost(edge, 1, 1, weights) == 0.0

    def test_spatial_weight(self):
        weights = _weights(2, w2d=[[0, 2.037], [2.037, 0]])
        assert pairwise_cost(Edge(EdgeKind.SPATIAL_2D, A2, B2, 1.0), 0, 1, weights) == pytest.approx(2.037)

    def test_cross_modal_is_directional(self):
        weights = _weights(2, w2d3d=[[0, 1.0], [-0.2, 0]])
        edge = Edge(EdgeKind.CROSS_MODAL, A2, C3, 0.5)
        assert pairwise_cost(edge, 0, 1, weights) == pytest.approx(0.5)
        assert pairwise_cost(edge, 1, 0, weights) == pytest.approx(-0.1)

    def test_bias_is_added_inside_indicator(self):
        weights = _weights(2, w3d=[[0, 1.0], [1.0, 0]], b3d=[[0, 0.25], [0.25, 0]])
        edge = Edge(EdgeKind.SPATIAL_3D, C3, NodeRef(1, Modality.LIDAR_3D, 1), 0.5)
        assert pairwise_cost(edge, 0, 1, weights) == pytest.approx(0.75)

    def test_tables_match_pairwise_cost(self):
        rng = np.random.default_rng(3)
        graph = random_graph(rng, 8, 3, extra_edges=3)
        weights = uniform_weights(rng, 3, 1.0, 0.5)
        tables = edge_cost_tables(graph, weights)
        for e, edge in enumerate(graph.edges):
            for i in range(3):
                for j in range(3):
                    assert tables[e, i, j] == pytest.approx(pairwise_cost(edge, i, j, weights))


class TestTotalEnergy:
    """Test the Gibbs energy."""

    def setup_method(self):
        self.labels = LabelSet(("a", "b"))

    def test_single_node(self):
        graph = build_graph(self.labels, [(A2, NodePayload.from_probabilities([0.25, 0.75]))], [])
        assert total_energy(graph, {A2: 0}, WeightSet.zeros(2)) == pytest.approx(1.3863, abs=1e-4)

    def test_certain_agreeing_labeling(self):
        payload = NodePayload.from_probabilities([1.0, 0.0], prob_floor=1e-9)
        graph = build_graph(self.labels, [(A2, payload), (B2, payload)],
                            [Edge(EdgeKind.SPATIAL_2D, A2, B2, 1.0)])
        weights = _weights(2, w2d=[[0, 3.0], [3.0, 0]])
        assert total_energy(graph, {A2: 0, B2: 0}, weights) == pytest.approx(0.0, abs=1e-8)

    def test_two_node_chain(self):
        payload = NodePayload.from_probabilities([0.5, 0.5])
        graph = build_graph(self.labels, [(A2, payload), (B2, payload)],
                            [Edge(EdgeKind.SPATIAL_2D, A2, B2, 0.5)])
        weights = _weights(2, w2d=[[0, 1.5], [1.5, 0]], b2d=[[0, 0.25], [0.25, 0]])
        assert total_energy(graph, {A2: 0, B2: 1}, weights) == pytest.approx(2.3863, abs=1e-4)

    def test_inadmissible_label(self):
        payload = NodePayload.from_probabilities([0.5, 0.5], admissible=[True, False])
        graph = build_graph(self.labels, [(C3, payload)], [])
        with pytest.raises(LabelError, match="inadmissible"):
            total_energy(graph, {C3: 1}, WeightSet.zeros(2))

    def test_incomplete_labeling(self):
        payload = NodePayload.from_probabilities([0.5, 0.5])
        graph = build_graph(self.labels, [(A2, payload), (B2, payload)], [])
        with pytest.raises(LabelError, match="misses"):
            total_energy(graph, {A2: 0}, WeightSet.zeros(2))

    def test_edge_order_invariance(self):
        rng = np.random.default_rng(5)
        graph = random_graph(rng, 7, 3, extra_edges=2)
        reversed_graph = build_graph(graph.label_set, graph.nodes.items(), list(reversed(graph.edges)))
        weights = uniform_weights(rng, 3, 1.0, 0.3)
        labeling = {ref: int(rng.integers(3)) for ref in graph.order}
        assert total_energy(graph, labeling, weights) == pytest.approx(total_energy(reversed_graph, labeling, weights))

    def test_zero_weights_factorize(self):
        rng = np.random.default_rng(11)
        graph = random_graph(rng, 6, 3, extra_edges=3)
        exact = exact_enumerate(graph, WeightSet.zeros(3))
        for ref in graph.order:
            assert np.allclose(exact.node_marginals[ref], graph.nodes[ref].probabilities, atol=1e-12)
