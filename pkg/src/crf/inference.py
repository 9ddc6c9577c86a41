"""
Inference on fusion graphs.

Loopy belief propagation (sum-product and max-product) in log space, an
exact two-pass schedule for forests, and exhaustive enumeration used as a
test oracle on small graphs.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from src.core.exceptions import InferenceError, StateSpaceError
from src.core.graph import FusionGraph
from src.core.models import NodeRef
from src.core.weights import WeightSet
from src.crf.potentials import edge_cost_tables, labeling_energies


logger = logging.getLogger('obstacle_fusion.inference')

SCHEDULES = ("sequential", "parallel")
MAX_ENUMERATION_STATES = 10 ** 7
_ENUMERATION_CHUNK = 1 << 16
_ICM_MAX_SWEEPS = 50


@dataclass(frozen=True)
class BPConfig:
    """Loopy belief propagation settings."""
    max_iterations: int = 200
    tolerance: float = 1e-6
    damping: float = 0.5
    schedule: str = "sequential"

    def __post_init__(self):
        """Validate ranges."""
        if self.max_iterations < 1:
            raise InferenceError("max_iterations must be positive")
        if not self.tolerance > 0:
            raise InferenceError("tolerance must be positive")
        if not (0.0 <= self.damping < 1.0):
            raise InferenceError("damping must lie in [0, 1)")
        if self.schedule not in SCHEDULES:
            raise InferenceError(f"Unknown schedule '{self.schedule}' (expected one of {SCHEDULES})")


@dataclass(frozen=True)
class InferenceResult:
    """Marginals and partition-function estimate of one inference run.

    ``edge_marginals`` is aligned with ``graph.edges``; tables are indexed
    ``[label of a][label of b]``.
    """
    node_marginals: Mapping[NodeRef, np.ndarray]
    edge_marginals: Tuple[np.ndarray, ...]
    log_partition: float
    converged: bool
    iterations_used: int

    def marginal_matrix(self, graph: FusionGraph) -> np.ndarray:
        """Node marginals stacked in graph order."""
        return np.stack([self.node_marginals[ref] for ref in graph.order])


@dataclass(frozen=True)
class EnumerationResult:
    """Exact quantities obtained by summing over every admissible labeling."""
    node_marginals: Mapping[NodeRef, np.ndarray]
    edge_marginals: Tuple[np.ndarray, ...]
    log_partition: float
    map_labeling: Mapping[NodeRef, int]
    map_energy: float


def _clamped_unary(graph: FusionGraph, clamp: Optional[Mapping[NodeRef, int]]) -> np.ndarray:
    """Unary log-potentials with clamped nodes reduced to a single label.

    The clamped label keeps its own unary term so that the clamped partition
    function sums the true energy of the consistent labelings.
    """
    theta = np.array(graph.unary, dtype=float)
    for ref, label in (clamp or {}).items():
        if ref not in graph.index:
            raise InferenceError(f"Cannot clamp unknown node {ref}")
        i = graph.index[ref]
        if not (0 <= label < graph.label_set.count) or not graph.admissible[i, label]:
            raise InferenceError(f"Cannot clamp node {ref} to inadmissible label {label}")
        kept = theta[i, label]
        theta[i] = -np.inf
        theta[i, label] = kept
    return theta


class _MessagePassing:
    """Directed-message bookkeeping shared by the sum- and max-product runs.

    Directed message ``2e`` flows a→b along edge ``e`` and ``2e + 1`` flows b→a.
    """

    def __init__(self, graph: FusionGraph, weights: WeightSet, theta: np.ndarray):
        self.graph = graph
        self.theta = theta
        self.tables = edge_cost_tables(graph, weights)
        n_edges = graph.edge_count
        count = graph.label_set.count

        self.src = np.empty(2 * n_edges, dtype=np.int64)
        self.dst = np.empty(2 * n_edges, dtype=np.int64)
        self.src[0::2], self.dst[0::2] = graph.endpoints[:, 0], graph.endpoints[:, 1]
        self.src[1::2], self.dst[1::2] = graph.endpoints[:, 1], graph.endpoints[:, 0]
        # oriented[d][x_src, x_dst]
        self.oriented = np.empty((2 * n_edges, count, count))
        self.oriented[0::2] = self.tables
        self.oriented[1::2] = np.transpose(self.tables, (0, 2, 1))

        self.incoming: List[np.ndarray] = [
            np.array([2 * e + (0 if graph.endpoints[e, 1] == i else 1) for _, e in graph.neighbors[i]],
                     dtype=np.int64)
            for i in range(graph.node_count)
        ]
        self.outgoing: List[List[int]] = [
            [2 * e + (0 if graph.endpoints[e, 0] == i else 1) for _, e in graph.neighbors[i]]
            for i in range(graph.node_count)
        ]
        self.messages = np.zeros((2 * n_edges, count))

    def cavity(self, d: int) -> np.ndarray:
        """Source-node belief excluding the message coming back along ``d``."""
        s = self.src[d]
        incoming = self.messages[self.incoming[s]].sum(axis=0)
        return self.theta[s] + incoming - self.messages[d ^ 1]

    def compute(self, d: int, use_max: bool) -> np.ndarray:
        vals = self.cavity(d)[:, None] - self.oriented[d]
        if use_max:
            out = vals.max(axis=0)
        else:
            peak = vals.max(axis=0)
            out = peak + np.log(np.exp(vals - peak).sum(axis=0))
        return out - out.max()

    def compute_all(self, use_max: bool) -> np.ndarray:
        totals = np.zeros_like(self.theta)
        np.add.at(totals, self.dst, self.messages)
        cav = self.theta[self.src] + totals[self.src] - self.messages[np.arange(len(self.src)) ^ 1]
        vals = cav[:, :, None] - self.oriented
        out = vals.max(axis=1) if use_max else logsumexp(vals, axis=1)
        return out - out.max(axis=1, keepdims=True)

    def run_loopy(self, cfg: BPConfig, use_max: bool) -> Tuple[bool, int]:
        """Damped message updates until the largest change drops below tolerance."""
        if len(self.src) == 0:
            return True, 0
        order = [d for i in range(self.graph.node_count) for d in self.outgoing[i]]
        for iteration in range(1, cfg.max_iterations + 1):
            delta = 0.0
            if cfg.schedule == "parallel":
                new = self.compute_all(use_max)
                if cfg.damping > 0:
                    new = (1.0 - cfg.damping) * new + cfg.damping * self.messages
                    new -= new.max(axis=1, keepdims=True)
                delta = float(np.abs(new - self.messages).max())
                self.messages = new
            else:
                for d in order:
                    new = self.compute(d, use_max)
                    if cfg.damping > 0:
                        new = (1.0 - cfg.damping) * new + cfg.damping * self.messages[d]
                        new -= new.max()
                    delta = max(delta, float(np.abs(new - self.messages[d]).max()))
                    self.messages[d] = new
            if delta < cfg.tolerance:
                return True, iteration
        return False, cfg.max_iterations

    def spanning_order(self) -> List[Tuple[int, Optional[int]]]:
        """BFS order of (node, directed message from its parent) over every component."""
        seen = np.zeros(self.graph.node_count, dtype=bool)
        order: List[Tuple[int, Optional[int]]] = []
        for root in range(self.graph.node_count):
            if seen[root]:
                continue
            seen[root] = True
            start = len(order)
            order.append((root, None))
            while start < len(order):
                node = order[start][0]
                start += 1
                for d in self.outgoing[node]:
                    child = int(self.dst[d])
                    if not seen[child]:
                        seen[child] = True
                        order.append((child, d))
        return order

    def run_tree(self, use_max: bool) -> List[Tuple[int, Optional[int]]]:
        """Exact collect/distribute pass on a forest."""
        order = self.spanning_order()
        for node, down in reversed(order):
            if down is not None:
                up = down ^ 1
                self.messages[up] = self.compute(up, use_max)
        for node, down in order:
            if down is not None:
                self.messages[down] = self.compute(down, use_max)
        return order

    def node_log_beliefs(self) -> np.ndarray:
        totals = np.zeros_like(self.theta)
        np.add.at(totals, self.dst, self.messages)
        return self.theta + totals

    def marginals(self) -> Tuple[np.ndarray, np.ndarray]:
        """Normalized node and edge beliefs."""
        log_nodes = self.node_log_beliefs()
        nodes = np.exp(log_nodes - logsumexp(log_nodes, axis=1, keepdims=True))

        n_edges = self.graph.edge_count
        count = self.graph.label_set.count
        edges = np.zeros((n_edges, count, count))
        for e in range(n_edges):
            a, b = self.graph.endpoints[e]
            cav_a = log_nodes[a] - self.messages[2 * e + 1]
            cav_b = log_nodes[b] - self.messages[2 * e]
            joint = cav_a[:, None] + cav_b[None, :] - self.tables[e]
            joint = np.exp(joint - joint.max())
            edges[e] = joint / joint.sum()
        return nodes, edges

    def bethe_log_partition(self, nodes: np.ndarray, edges: np.ndarray) -> float:
        """Bethe estimate of log Z (exact on forests)."""
        degrees = np.array([len(n) for n in self.graph.neighbors], dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            node_energy = -np.where(nodes > 0, nodes * self.theta, 0.0).sum()
            edge_energy = float((edges * self.tables).sum())
            node_entropy = -np.where(nodes > 0, nodes * np.log(nodes), 0.0).sum(axis=1)
            edge_entropy = -np.where(edges > 0, edges * np.log(edges), 0.0).sum(axis=(1, 2))
        average_energy = node_energy + edge_energy
        entropy = edge_entropy.sum() + ((1.0 - degrees) * node_entropy).sum()
        return float(-average_energy + entropy)


def _check_graph(graph: FusionGraph) -> None:
    if graph.node_count == 0:
        raise InferenceError("Cannot run inference on an empty graph")


def sum_product(graph: FusionGraph, weights: WeightSet, cfg: BPConfig = BPConfig(),
                clamp: Optional[Mapping[NodeRef, int]] = None) -> InferenceResult:
    """Marginals and Bethe log-partition by sum-product belief propagation.

    Forests are solved exactly with a single collect/distribute pass; cyclic
    graphs iterate damped updates under ``cfg``. Non-convergence is logged
    and reported through ``converged``.

    Raises:
        InferenceError: empty graph or clamp on an unknown node/label
    """
    _check_graph(graph)
    mp = _MessagePassing(graph, weights, _clamped_unary(graph, clamp))
    if graph.is_forest():
        mp.run_tree(use_max=False)
        converged, iterations = True, 1
    else:
        converged, iterations = mp.run_loopy(cfg, use_max=False)
        if not converged:
            logger.warning(f"Belief propagation did not converge within {iterations} iterations "
                           f"({graph.node_count} nodes, {graph.edge_count} edges)")
    nodes, edges = mp.marginals()
    log_z = mp.bethe_log_partition(nodes, edges)
    return InferenceResult(
        node_marginals={ref: nodes[i] for i, ref in enumerate(graph.order)},
        edge_marginals=tuple(edges),
        log_partition=log_z,
        converged=converged,
        iterations_used=iterations,
    )


def _local_costs(graph: FusionGraph, tables: np.ndarray, theta: np.ndarray,
                 labels: np.ndarray, node: int) -> np.ndarray:
    """Energy of each label at ``node`` with all other labels fixed."""
    cost = -theta[node].copy()
    for neighbor, e in graph.neighbors[node]:
        if graph.endpoints[e, 0] == node:
            cost += tables[e][:, labels[neighbor]]
        else:
            cost += tables[e][labels[neighbor], :]
    return cost


def _icm_polish(graph: FusionGraph, tables: np.ndarray, theta: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Iterated conditional modes; a label only changes on strict improvement."""
    labels = labels.copy()
    for _ in range(_ICM_MAX_SWEEPS):
        changed = False
        for node in range(graph.node_count):
            cost = _local_costs(graph, tables, theta, labels, node)
            best = int(np.argmin(cost))
            if cost[best] < cost[labels[node]] - 1e-12:
                labels[node] = best
                changed = True
        if not changed:
            break
    return labels


def max_product_decode(graph: FusionGraph, weights: WeightSet, cfg: BPConfig = BPConfig()) -> Dict[NodeRef, int]:
    """Most likely labeling of every node (hidden nodes included).

    Forests are decoded exactly by backtracking; on cyclic graphs the
    max-marginal argmax is refined by iterated conditional modes. Ties go
    to the lowest label index.
    """
    _check_graph(graph)
    theta = _clamped_unary(graph, None)
    mp = _MessagePassing(graph, weights, theta)
    labels = np.zeros(graph.node_count, dtype=np.int64)

    if graph.is_forest():
        order = mp.run_tree(use_max=True)
        log_beliefs = mp.node_log_beliefs()
        for node, down in order:
            if down is None:
                labels[node] = int(np.argmax(log_beliefs[node]))
            else:
                parent = int(mp.src[down])
                score = log_beliefs[node] - mp.messages[down] - mp.oriented[down][labels[parent]]
                labels[node] = int(np.argmax(score))
    else:
        converged, iterations = mp.run_loopy(cfg, use_max=True)
        if not converged:
            logger.warning(f"Max-product did not converge within {iterations} iterations")
        labels = np.argmax(mp.node_log_beliefs(), axis=1)
        labels = _icm_polish(graph, mp.tables, theta, labels)

    return {ref: int(labels[i]) for i, ref in enumerate(graph.order)}


def marginal_argmax_decode(graph: FusionGraph, result: InferenceResult) -> Dict[NodeRef, int]:
    """Per-node argmax of sum-product marginals (lowest index on ties)."""
    decoded = {}
    for i, ref in enumerate(graph.order):
        marginal = np.where(graph.admissible[i], result.node_marginals[ref], -np.inf)
        decoded[ref] = int(np.argmax(marginal))
    return decoded


def _allowed_labels(graph: FusionGraph, clamp: Optional[Mapping[NodeRef, int]]) -> List[np.ndarray]:
    theta = _clamped_unary(graph, clamp)
    return [np.flatnonzero(np.isfinite(theta[i])) for i in range(graph.node_count)]


def _state_count(allowed: Sequence[np.ndarray], limit: int) -> int:
    total = 1
    for labels in allowed:
        total *= len(labels)
        if total > limit:
            raise StateSpaceError(f"Exact enumeration needs more than {limit} labelings")
    return total


def exact_enumerate(graph: FusionGraph, weights: WeightSet,
                    clamp: Optional[Mapping[NodeRef, int]] = None,
                    max_states: int = MAX_ENUMERATION_STATES) -> EnumerationResult:
    """Exact marginals, log-partition and MAP labeling by summing over all labelings.

    Raises:
        StateSpaceError: if more than ``max_states`` admissible labelings exist
    """
    _check_graph(graph)
    allowed = _allowed_labels(graph, clamp)
    total = _state_count(allowed, max_states)
    sizes = tuple(len(a) for a in allowed)
    tables = edge_cost_tables(graph, weights)
    count = graph.label_set.count
    n = graph.node_count

    node_acc = np.zeros((n, count))
    edge_acc = np.zeros((graph.edge_count, count, count))
    mass = 0.0
    reference = np.inf
    best_energy = np.inf
    best_labels: Optional[np.ndarray] = None

    for start in range(0, total, _ENUMERATION_CHUNK):
        flat = np.arange(start, min(total, start + _ENUMERATION_CHUNK))
        digits = np.unravel_index(flat, sizes)
        labels = np.stack([allowed[i][digits[i]] for i in range(n)], axis=1)
        energies = labeling_energies(graph, tables, labels)

        chunk_min = float(energies.min())
        if chunk_min < best_energy:
            best_energy = chunk_min
            best_labels = labels[int(np.argmin(energies))].copy()
        if chunk_min < reference:
            if np.isfinite(reference):
                scale = np.exp(-(reference - chunk_min))
                node_acc *= scale
                edge_acc *= scale
                mass *= scale
            reference = chunk_min

        w = np.exp(-(energies - reference))
        mass += float(w.sum())
        for i in range(n):
            node_acc[i] += np.bincount(labels[:, i], weights=w, minlength=count)
        for e, (a, b) in enumerate(graph.endpoints):
            np.add.at(edge_acc[e], (labels[:, a], labels[:, b]), w)

    node_marg = node_acc / mass
    edge_marg = edge_acc / mass
    return EnumerationResult(
        node_marginals={ref: node_marg[i] for i, ref in enumerate(graph.order)},
        edge_marginals=tuple(edge_marg),
        log_partition=float(-reference + np.log(mass)),
        map_labeling={ref: int(best_labels[i]) for i, ref in enumerate(graph.order)},
        map_energy=float(best_energy),
    )


def exact_sample(graph: FusionGraph, weights: WeightSet, rng: np.random.Generator,
                 count: int = 1, max_states: int = 10 ** 6) -> List[Dict[NodeRef, int]]:
    """Draw labelings from the exact model distribution (small graphs only)."""
    _check_graph(graph)
    allowed = _allowed_labels(graph, None)
    total = _state_count(allowed, max_states)
    sizes = tuple(len(a) for a in allowed)
    digits = np.unravel_index(np.arange(total), sizes)
    labels = np.stack([allowed[i][digits[i]] for i in range(graph.node_count)], axis=1)
    energies = labeling_energies(graph, edge_cost_tables(graph, weights), labels)
    probs = np.exp(-(energies - energies.min()))
    probs /= probs.sum()
    picks = rng.choice(total, size=count, p=probs)
    return [{ref: int(labels[k, i]) for i, ref in enumerate(graph.order)} for k in picks]
