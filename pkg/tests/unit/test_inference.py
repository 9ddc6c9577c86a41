"""Tests for belief propagation, decoding and the enumeration oracle."""

import numpy as np
import pytest

from src.core.exceptions import InferenceError, StateSpaceError
from src.core.graph import build_graph
from src.core.models import Edge, EdgeKind, LabelSet, Modality, NodePayload, NodeRef
from src.core.weights import WeightSet
from src.crf.inference import (
    BPConfig,
    exact_enumerate,
    exact_sample,
    marginal_argmax_decode,
    max_product_decode,
    sum_product,
)
from src.crf.potentials import total_energy
from tests.graph_factory import random_graph, uniform_weights


ORACLE_CASES = 100


def _oracle_graph(seed, max_nodes, extra_edges=0, max_states=20000):
    """Random graph with 2-4 labels, shrunk until enumeration stays cheap."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(2, 5))
    nodes = int(rng.integers(5 if extra_edges else 2, max_nodes + 1))
    while count ** nodes > max_states:
        nodes -= 1
    return random_graph(rng, nodes, count, extra_edges=extra_edges), rng, count


class TestBPConfig:
    """Test BP settings validation."""

    def test_defaults(self):
        cfg = BPConfig()
        assert cfg.max_iterations == 200
        assert cfg.damping == 0.5
        assert cfg.schedule == "sequential"

    @pytest.mark.parametrize("kwargs", [
        {"max_iterations": 0},
        {"tolerance": 0.0},
        {"damping": 1.0},
        {"schedule": "random"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(InferenceError):
            BPConfig(**kwargs)


class TestSumProductOnForests:
    """Sum-product is exact on forests."""

    def test_matches_enumeration(self):
        for seed in range(ORACLE_CASES):
            graph, rng, count = _oracle_graph(seed, max_nodes=12)
            weights = uniform_weights(rng, count, bound=2.0, bias_bound=1.0)
            assert graph.is_forest()

            result = sum_product(graph, weights)
            exact = exact_enumerate(graph, weights)

            assert result.converged
            assert result.log_partition == pytest.approx(exact.log_partition, abs=1e-9), f"seed {seed}"
            for ref in graph.order:
                assert np.allclose(result.node_marginals[ref], exact.node_marginals[ref], atol=1e-9), f"seed {seed}"
            for ours, theirs in zip(result.edge_marginals, exact.edge_marginals):
                assert np.allclose(ours, theirs, atol=1e-9), f"seed {seed}"

    def test_two_node_marginals_match_enumeration(self):
        labels = LabelSet(("a", "b"))
        a, b = NodeRef(1, Modality.IMAGE_2D, 0), NodeRef(1, Modality.LIDAR_3D, 0)
        graph = build_graph(labels, [(a, NodePayload.from_probabilities([0.5, 0.5])),
                                     (b, NodePayload.from_probabilities([0.9, 0.1]))],
                            [Edge(EdgeKind.CROSS_MODAL, a, b, 1.0)])
        weights = WeightSet.zeros(2)
        weights.w2d3d[:] = [[0.0, 3.0], [3.0, 0.0]]

        result = sum_product(graph, weights)
        exact = exact_enumerate(graph, weights)

        assert result.node_marginals[a][0] > 0.5
        for ref in (a, b):
            assert np.allclose(result.node_marginals[ref], exact.node_marginals[ref], atol=1e-12)

    def test_clamped_partition_matches_enumeration(self):
        rng = np.random.default_rng(8)
        graph = random_graph(rng, 6, 3)
        weights = uniform_weights(rng, 3, bound=1.5, bias_bound=0.5)
        clamp = {graph.order[0]: 2, graph.order[4]: 0}

        result = sum_product(graph, weights, clamp=clamp)
        exact = exact_enumerate(graph, weights, clamp=clamp)

        assert result.log_partition == pytest.approx(exact.log_partition, abs=1e-9)
        assert np.allclose(result.node_marginals[graph.order[0]], [0.0, 0.0, 1.0])
        for ref in graph.order:
            assert np.allclose(result.node_marginals[ref], exact.node_marginals[ref], atol=1e-9)

    def test_clamp_lowers_partition(self):
        rng = np.random.default_rng(4)
        graph = random_graph(rng, 5, 3)
        weights = uniform_weights(rng, 3, bound=1.0)
        free = sum_product(graph, weights)
        clamped = sum_product(graph, weights, clamp={graph.order[1]: 1})
        assert clamped.log_partition < free.log_partition

    def test_zero_weights_return_initial_probabilities(self):
        rng = np.random.default_rng(6)
        graph = random_graph(rng, 8, 4, extra_edges=4)
        result = sum_product(graph, WeightSet.zeros(4))
        for ref in graph.order:
            assert np.allclose(result.node_marginals[ref], graph.nodes[ref].probabilities, atol=1e-9)

    def test_single_node(self):
        ref = NodeRef(1, Modality.IMAGE_2D, 0)
        graph = build_graph(LabelSet(("a", "b")), [(ref, NodePayload.from_probabilities([0.3, 0.7]))], [])
        result = sum_product(graph, WeightSet.zeros(2))
        assert result.log_partition == pytest.approx(0.0, abs=1e-9)
        assert np.allclose(result.node_marginals[ref], [0.3, 0.7])

    def test_empty_graph(self):
        graph = build_graph(LabelSet(("a", "b")), [], [])
        with pytest.raises(InferenceError, match="empty"):
            sum_product(graph, WeightSet.zeros(2))

    def test_clamp_to_unknown_node(self):
        rng = np.random.default_rng(2)
        graph = random_graph(rng, 3, 2)
        with pytest.raises(InferenceError):
            sum_product(graph, WeightSet.zeros(2), clamp={NodeRef(5, Modality.IMAGE_2D, 99): 0})


class TestLoopyBeliefPropagation:
    """Damped loopy BP on cyclic graphs."""

    @pytest.mark.parametrize("schedule", ["sequential", "parallel"])
    def test_weak_coupling_is_close_to_exact(self, schedule):
        for seed in range(ORACLE_CASES):
            graph, rng, count = _oracle_graph(seed, max_nodes=10, extra_edges=int(seed % 4) + 1)
            # |w * kernel + b| <= 0.3 on every edge
            weights = uniform_weights(rng, count, bound=0.15, bias_bound=0.15)
            assert not graph.is_forest()

            result = sum_product(graph, weights, BPConfig(schedule=schedule))
            exact = exact_enumerate(graph, weights)

            assert result.converged, f"seed {seed}"
            assert result.iterations_used >= 1
            for ref in graph.order:
                assert np.abs(result.node_marginals[ref] - exact.node_marginals[ref]).max() < 0.05, f"seed {seed}"
            assert result.log_partition == pytest.approx(exact.log_partition, abs=0.05)

    def test_schedules_reach_the_same_fixed_point(self):
        cfg = dict(tolerance=1e-10, max_iterations=2000)
        for seed in range(20):
            graph, rng, count = _oracle_graph(seed, max_nodes=9, extra_edges=3)
            weights = uniform_weights(rng, count, bound=0.3, bias_bound=0.2)

            sequential = sum_product(graph, weights, BPConfig(schedule="sequential", **cfg))
            parallel = sum_product(graph, weights, BPConfig(schedule="parallel", **cfg))

            assert sequential.converged and parallel.converged
            assert sequential.log_partition == pytest.approx(parallel.log_partition, abs=1e-6), f"seed {seed}"
            for ref in graph.order:
                assert np.allclose(sequential.node_marginals[ref], parallel.node_marginals[ref], atol=1e-6)

    def test_marginals_are_distributions(self):
        rng = np.random.default_rng(13)
        graph = random_graph(rng, 9, 4, extra_edges=5)
        result = sum_product(graph, uniform_weights(rng, 4, bound=0.5, bias_bound=0.2))
        matrix = result.marginal_matrix(graph)
        assert matrix.shape == (9, 4)
        assert np.allclose(matrix.sum(axis=1), 1.0)
        assert (matrix >= 0).all()
        for table in result.edge_marginals:
            assert table.sum() == pytest.approx(1.0)


class TestDecoding:
    """MAP decoding."""

    def test_max_product_is_exact_on_trees(self):
        for seed in range(ORACLE_CASES):
            graph, rng, count = _oracle_graph(seed, max_nodes=12)
            weights = uniform_weights(rng, count, bound=2.0, bias_bound=1.0)
            decoded = max_product_decode(graph, weights)
            exact = exact_enumerate(graph, weights)
            assert total_energy(graph, decoded, weights) == pytest.approx(exact.map_energy, abs=1e-9), f"seed {seed}"

    def test_weakly_coupled_loopy_decoding_is_near_map(self):
        near = 0
        for seed in range(ORACLE_CASES):
            graph, rng, count = _oracle_graph(seed, max_nodes=10, extra_edges=int(seed % 4) + 1)
            weights = uniform_weights(rng, count, bound=0.15, bias_bound=0.15)
            energy = total_energy(graph, max_product_decode(graph, weights), weights)
            best = exact_enumerate(graph, weights).map_energy
            assert energy >= best - 1e-9
            near += abs(energy - best) <= 0.02 * abs(best)
        assert near >= 90

    def test_loopy_decoding_is_locally_optimal(self):
        rng = np.random.default_rng(21)
        graph = random_graph(rng, 7, 3, extra_edges=4)
        weights = uniform_weights(rng, 3, bound=1.0, bias_bound=0.5)
        decoded = max_product_decode(graph, weights)
        energy = total_energy(graph, decoded, weights)
        for ref in graph.order:
            for label in np.flatnonzero(graph.admissible[graph.index[ref]]):
                changed = dict(decoded)
                changed[ref] = int(label)
                assert total_energy(graph, changed, weights) >= energy - 1e-9

    def test_zero_weights_decode_to_initial_argmax(self):
        rng = np.random.default_rng(3)
        graph = random_graph(rng, 8, 4, extra_edges=3)
        expected = {ref: int(np.argmax(graph.nodes[ref].probabilities)) for ref in graph.order}
        assert max_product_decode(graph, WeightSet.zeros(4)) == expected
        result = sum_product(graph, WeightSet.zeros(4))
        assert marginal_argmax_decode(graph, result) == expected

    def test_decoded_labels_are_admissible(self):
        labels = LabelSet(("ground", "sky", "object"))
        a = NodeRef(1, Modality.LIDAR_3D, 0)
        payload = NodePayload.from_probabilities([0.1, 0.0, 0.9], admissible=[True, False, True])
        graph = build_graph(labels, [(a, payload)], [])
        assert max_product_decode(graph, WeightSet.zeros(3))[a] == 2


class TestEnumeration:
    """The exhaustive oracle."""

    def test_state_space_limit(self):
        rng = np.random.default_rng(1)
        graph = random_graph(rng, 5, 3)
        with pytest.raises(StateSpaceError):
            exact_enumerate(graph, WeightSet.zeros(3), max_states=10)

    def test_map_energy_is_minimum(self):
        rng = np.random.default_rng(7)
        graph = random_graph(rng, 5, 2, extra_edges=2)
        weights = uniform_weights(rng, 2, bound=1.0, bias_bound=1.0)
        exact = exact_enumerate(graph, weights)
        assert total_energy(graph, exact.map_labeling, weights) == pytest.approx(exact.map_energy)
        for _ in range(20):
            labeling = {ref: int(rng.integers(2)) for ref in graph.order}
            assert total_energy(graph, labeling, weights) >= exact.map_energy - 1e-12

    def test_samples_follow_marginals(self):
        rng = np.random.default_rng(17)
        graph = random_graph(rng, 3, 2)
        weights = uniform_weights(rng, 2, bound=1.0)
        exact = exact_enumerate(graph, weights)
        samples = exact_sample(graph, weights, np.random.default_rng(0), count=4000)
        for ref in graph.order:
            frequency = np.mean([s[ref] == 1 for s in samples])
            assert frequency == pytest.approx(exact.node_marginals[ref][1], abs=0.05)
