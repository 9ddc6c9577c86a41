"""Small random fusion graphs shared by the CRF tests."""

from typing import Dict, List, Optional, Tuple

import numpy as np

from src.core.graph import FusionGraph, build_graph
from src.core.models import Edge, EdgeKind, LabelSet, Modality, NodePayload, NodeRef
from src.core.weights import WeightSet, parameter_layout


def generic_labels(count: int) -> LabelSet:
    return LabelSet(tuple(f"c{k}" for k in range(count)))


def node_ref(i: int) -> NodeRef:
    """Node i: every fourth node is a 3D node of the previous frame, odd nodes are 3D."""
    if i % 4 == 3:
        return NodeRef(0, Modality.LIDAR_3D, i)
    modality = Modality.LIDAR_3D if i % 2 == 1 else Modality.IMAGE_2D
    return NodeRef(1, modality, i)


def edge_kind(a: NodeRef, b: NodeRef) -> Optional[EdgeKind]:
    if a.frame == b.frame:
        if a.modality is b.modality:
            return EdgeKind.SPATIAL_2D if a.modality is Modality.IMAGE_2D else EdgeKind.SPATIAL_3D
        return EdgeKind.CROSS_MODAL
    if a.modality is b.modality is Modality.LIDAR_3D:
        return EdgeKind.TEMPORAL
    return None


def random_payload(rng: np.random.Generator, count: int) -> NodePayload:
    return NodePayload.from_probabilities(rng.dirichlet(np.ones(count)))


def random_graph(rng: np.random.Generator, nodes: int, count: int, extra_edges: int = 0,
                 hidden_fraction: float = 0.0) -> FusionGraph:
    """Random spanning tree over ``nodes`` nodes plus up to ``extra_edges`` cycle-closing edges."""
    refs = [node_ref(i) for i in range(nodes)]
    pairs: List[Tuple[int, int]] = []
    for i in range(1, nodes):
        parents = [j for j in range(i) if edge_kind(refs[i], refs[j]) is not None]
        pairs.append((int(rng.choice(parents)), i))
    candidates = [(i, j) for i in range(nodes) for j in range(i + 1, nodes)
                  if (i, j) not in pairs and edge_kind(refs[i], refs[j]) is not None]
    rng.shuffle(candidates)
    pairs.extend(candidates[:extra_edges])

    edges = [Edge(edge_kind(refs[a], refs[b]), refs[a], refs[b], float(rng.uniform(0.1, 1.0))) for a, b in pairs]
    hidden = {ref for ref in refs if rng.random() < hidden_fraction}
    return build_graph(generic_labels(count), [(ref, random_payload(rng, count)) for ref in refs], edges, hidden)


def uniform_weights(rng: np.random.Generator, count: int, bound: float, bias_bound: float = 0.0,
                    l2_lambda: float = 0.0) -> WeightSet:
    """Weights and biases drawn uniformly from [-bound, bound] and [-bias_bound, bias_bound]."""
    vector = np.array([
        rng.uniform(-bias_bound, bias_bound) if slot.is_bias else rng.uniform(-bound, bound)
        for slot in parameter_layout(count)
    ])
    return WeightSet.from_vector(vector, count, l2_lambda=l2_lambda)


def labels_of(graph: FusionGraph, rng: np.random.Generator) -> Dict[NodeRef, int]:
    """A random admissible labeling of the observed nodes."""
    observed = {}
    for ref in graph.observed():
        allowed = np.flatnonzero(graph.admissible[graph.index[ref]])
        observed[ref] = int(rng.choice(allowed))
    return observed
