"""
Fusion graph: typed nodes (superpixels, supervoxels) linked by four edge families.
"""

from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from src.core.exceptions import (
    DanglingEndpointError,
    DuplicateEdgeError,
    DuplicateNodeError,
    EdgeKindMismatchError,
    GraphValidationError,
    KernelRangeError,
    LabelError,
)
from src.core.models import (
    Edge,
    EdgeKind,
    LabelSet,
    Modality,
    NodePayload,
    NodeRef,
    SKY,
    mapped_labels,
)


class FusionGraph:
    """
    Immutable undirected graph over 2D and 3D segment nodes.

    Nodes are indexed in (frame, modality, index) order; the dense arrays
    below follow that order and are what inference operates on.
    """

    def __init__(self, label_set: LabelSet, nodes: Mapping[NodeRef, NodePayload],
                 edges: Sequence[Edge], hidden: Iterable[NodeRef]):
        self.label_set = label_set
        self.nodes: Mapping[NodeRef, NodePayload] = MappingProxyType(dict(nodes))
        self.edges: Tuple[Edge, ...] = tuple(edges)
        self.hidden = frozenset(hidden)

        self.order: Tuple[NodeRef, ...] = tuple(sorted(self.nodes))
        self.index: Dict[NodeRef, int] = {ref: i for i, ref in enumerate(self.order)}

        n = len(self.order)
        count = label_set.count
        self.unary = np.full((n, count), -np.inf)
        self.admissible = np.zeros((n, count), dtype=bool)
        for i, ref in enumerate(self.order):
            payload = self.nodes[ref]
            self.unary[i] = payload.unary_log_prob
            self.admissible[i] = payload.admissible

        self.endpoints = np.array(
            [(self.index[e.a], self.index[e.b]) for e in self.edges], dtype=np.int64
        ).reshape(-1, 2)
        self.kernels = np.array([e.kernel for e in self.edges], dtype=float)
        self.kinds: Tuple[EdgeKind, ...] = tuple(e.kind for e in self.edges)

        # neighbors[i] -> list of (neighbor index, edge index), sorted by neighbor
        adjacency: List[List[Tuple[int, int]]] = [[] for _ in range(n)]
        for edge_idx, (a, b) in enumerate(self.endpoints):
            adjacency[a].append((int(b), edge_idx))
            adjacency[b].append((int(a), edge_idx))
        self.neighbors: Tuple[Tuple[Tuple[int, int], ...], ...] = tuple(
            tuple(sorted(adj)) for adj in adjacency
        )

        for array in (self.unary, self.admissible, self.endpoints, self.kernels):
            array.flags.writeable = False

    @property
    def node_count(self) -> int:
        return len(self.order)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def observed(self) -> List[NodeRef]:
        """Nodes whose labels can be observed (not hidden)."""
        return [ref for ref in self.order if ref not in self.hidden]

    def edges_of_kind(self, kind: EdgeKind) -> List[Edge]:
        return [e for e in self.edges if e.kind is kind]

    def is_forest(self) -> bool:
        """True when the graph has no cycles."""
        parent = list(range(self.node_count))

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b in self.endpoints:
            ra, rb = find(int(a)), find(int(b))
            if ra == rb:
                return False
            parent[ra] = rb
        return True

    def __repr__(self) -> str:
        return (f"FusionGraph(labels={list(self.label_set.names)}, nodes={self.node_count}, "
                f"edges={self.edge_count}, hidden={len(self.hidden)})")


def _check_edge(edge: Edge) -> Edge:
    """Validate kind/modality consistency and orient cross-modal edges 2D→3D."""
    if not (0.0 <= edge.kernel <= 1.0) or not np.isfinite(edge.kernel):
        raise KernelRangeError(f"Edge {edge.a}–{edge.b} kernel {edge.kernel} outside [0, 1]")

    a, b = edge.a, edge.b
    if edge.kind is EdgeKind.SPATIAL_2D:
        ok = a.modality is b.modality is Modality.IMAGE_2D and a.frame == b.frame
    elif edge.kind is EdgeKind.SPATIAL_3D:
        ok = a.modality is b.modality is Modality.LIDAR_3D and a.frame == b.frame
    elif edge.kind is EdgeKind.CROSS_MODAL:
        ok = a.modality is not b.modality and a.frame == b.frame
        if ok and a.modality is Modality.LIDAR_3D:
            edge = Edge(kind=edge.kind, a=b, b=a, kernel=edge.kernel)
    else:
        ok = a.modality is b.modality is Modality.LIDAR_3D and a.frame != b.frame
    if not ok:
        raise EdgeKindMismatchError(
            f"{edge.kind.value} edge cannot link {a} and {b} (kind/modality mismatch)"
        )
    return edge


def build_graph(label_set: LabelSet, nodes: Iterable[Tuple[NodeRef, NodePayload]],
                edges: Iterable[Edge], hidden: Optional[Set[NodeRef]] = None) -> FusionGraph:
    """Validate the parts of a fusion graph and assemble it.

    Raises:
        DuplicateNodeError: a NodeRef appears twice
        DanglingEndpointError: an edge references a missing node
        EdgeKindMismatchError: edge kind does not fit its endpoints
        KernelRangeError: kernel outside [0, 1]
        DuplicateEdgeError: the same unordered (kind, a, b) appears twice
    """
    node_map: Dict[NodeRef, NodePayload] = {}
    for ref, payload in nodes:
        if ref in node_map:
            raise DuplicateNodeError(f"Duplicate node {ref}")
        if len(payload.unary_log_prob) != label_set.count:
            raise GraphValidationError(
                f"Node {ref} has {len(payload.unary_log_prob)} label entries, expected {label_set.count}"
            )
        if ref.modality is Modality.LIDAR_3D and SKY in label_set \
                and payload.admissible[label_set.index(SKY)]:
            raise GraphValidationError(f"Lidar node {ref} must mark '{SKY}' inadmissible")
        node_map[ref] = payload

    checked: List[Edge] = []
    seen = set()
    for edge in edges:
        for end in (edge.a, edge.b):
            if end not in node_map:
                raise DanglingEndpointError(f"Edge endpoint {end} is not a graph node (dangling endpoint)")
        edge = _check_edge(edge)
        key = edge.key()
        if key in seen:
            raise DuplicateEdgeError(f"Duplicate {edge.kind.value} edge between {edge.a} and {edge.b}")
        seen.add(key)
        checked.append(edge)

    hidden = set(hidden or ())
    unknown = hidden - set(node_map)
    if unknown:
        raise DanglingEndpointError(f"Hidden nodes not in graph: {sorted(map(str, unknown))}")

    return FusionGraph(label_set, node_map, checked, hidden)


def restrict_labels(graph: FusionGraph, mapping: Mapping[str, str],
                    new_labels: Optional[LabelSet] = None) -> FusionGraph:
    """Merge labels: probabilities are summed per target label, masks OR-ed.

    Raises:
        LabelError: if the mapping is not total over the graph's labels
    """
    old = graph.label_set
    target = mapped_labels(old, dict(mapping), new_labels)
    target_of = np.array([target.index(mapping[name]) for name in old.names])

    nodes = []
    for ref in graph.order:
        payload = graph.nodes[ref]
        probs = np.zeros(target.count)
        admissible = np.zeros(target.count, dtype=bool)
        np.add.at(probs, target_of, payload.probabilities)
        np.logical_or.at(admissible, target_of, payload.admissible)
        if probs[admissible].sum() <= 0:
            raise LabelError(f"Node {ref} has no probability mass after label mapping")
        probs = probs / probs[admissible].sum()
        with np.errstate(divide="ignore"):
            log_prob = np.where(admissible, np.log(probs), -np.inf)
        nodes.append((ref, NodePayload(
            unary_log_prob=log_prob,
            admissible=admissible,
            centroid3d=payload.centroid3d,
            mean_rgb=payload.mean_rgb,
            normal_angle=payload.normal_angle,
        )))
    return build_graph(target, nodes, graph.edges, set(graph.hidden))
