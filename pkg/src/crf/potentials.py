"""
Unary and pairwise potentials of the fusion CRF and the Gibbs energy of a labeling.

All costs live in the energy domain: p(x | z) = exp(-E(x | z)) / Z(z).
"""

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from src.core.exceptions import LabelError, PotentialError
from src.core.graph import FusionGraph
from src.core.models import Edge, EdgeKind, NodeRef
from src.core.weights import WeightSet


@dataclass(frozen=True)
class KernelParams:
    """Kernel widths of the pairwise potentials and the unary probability floor."""
    sigma_2d: float = 0.5
    sigma_3d: float = 0.5
    sigma_nav: float = 1.0
    sigma_time: float = 1.0 / math.sqrt(8.0)
    prob_floor: float = 1e-9

    def __post_init__(self):
        """Validate ranges."""
        for name in ("sigma_2d", "sigma_3d", "sigma_nav", "sigma_time"):
            if not getattr(self, name) > 0:
                raise PotentialError(f"{name} must be positive")
        if not (0.0 < self.prob_floor <= 1e-3):
            raise PotentialError("prob_floor must lie in (0, 1e-3]")


def unary_cost(p: float, prob_floor: float = 1e-9) -> float:
    """Negative log of an initial class probability, clamped at ``prob_floor``."""
    if not (0.0 <= p <= 1.0):
        raise PotentialError(f"Probability {p} outside [0, 1]")
    return -math.log(max(p, prob_floor))


def rgb_kernel(rgb_i: Sequence[float], rgb_j: Sequence[float], sigma_2d: float) -> float:
    """Gaussian kernel on the RGB distance of two superpixels (channels in [0, 1])."""
    rgb_i = np.asarray(rgb_i, dtype=float)
    rgb_j = np.asarray(rgb_j, dtype=float)
    if np.any((rgb_i < 0) | (rgb_i > 1)) or np.any((rgb_j < 0) | (rgb_j > 1)):
        raise PotentialError("RGB components must lie in [0, 1]")
    sq = float(np.sum((rgb_i - rgb_j) ** 2))
    return math.exp(-sq / (2.0 * sigma_2d ** 2))


def normal_kernel(theta_i: float, theta_j: float, sigma_3d: float) -> float:
    """Gaussian kernel on the difference of two normal angles (radians)."""
    for theta in (theta_i, theta_j):
        if not (0.0 <= theta <= math.pi / 2 + 1e-12):
            raise PotentialError(f"Normal angle {theta} outside [0, pi/2]")
    return math.exp(-((theta_i - theta_j) ** 2) / (2.0 * sigma_3d ** 2))


def temporal_kernel(mean_nav_var: float, dist_m: float, sigma_nav: float, sigma_time: float) -> float:
    """Localization-trust factor times a Gaussian on the transformed-centroid distance."""
    if mean_nav_var < 0 or dist_m < 0:
        raise PotentialError("Localization variance and distance must be nonnegative")
    return (math.exp(-mean_nav_var / (2.0 * sigma_nav ** 2))
            * math.exp(-(dist_m ** 2) / (2.0 * sigma_time ** 2)))


def mean_nav_variance(cov_a: Sequence[float], cov_b: Sequence[float]) -> float:
    """Mean of the covariance diagonals averaged over two navigation samples."""
    a = np.asarray(cov_a, dtype=float)
    b = np.asarray(cov_b, dtype=float)
    return float(np.mean((a + b) / 2.0))


def pairwise_cost(edge: Edge, label_a: int, label_b: int, weights: WeightSet) -> float:
    """Cost of labeling the endpoints of ``edge`` with ``label_a`` and ``label_b``.

    For cross-modal edges ``label_a`` belongs to the 2D node.
    """
    if label_a == label_b:
        return 0.0
    w, b = weights.for_kind(edge.kind)
    return float(w[label_a, label_b] * edge.kernel + b[label_a, label_b])


def edge_cost_tables(graph: FusionGraph, weights: WeightSet) -> np.ndarray:
    """Pairwise cost tables, shape (edges, labels, labels), rows indexed by endpoint ``a``."""
    count = graph.label_set.count
    if weights.count != count:
        raise LabelError(f"Weights cover {weights.count} labels, graph has {count}")
    tables = np.zeros((graph.edge_count, count, count))
    off_diagonal = ~np.eye(count, dtype=bool)
    for kind in EdgeKind:
        idx = [i for i, k in enumerate(graph.kinds) if k is kind]
        if not idx:
            continue
        w, b = weights.for_kind(kind)
        kernels = graph.kernels[idx][:, None, None]
        tables[idx] = (w[None] * kernels + b[None]) * off_diagonal[None]
    return tables


def total_energy(graph: FusionGraph, labeling: Mapping[NodeRef, int], weights: WeightSet) -> float:
    """Gibbs energy: unary costs plus pairwise costs over all four edge families.

    Hidden nodes missing from ``labeling`` are skipped together with their edges.

    Raises:
        LabelError: incomplete labeling or inadmissible assignment
    """
    missing = [ref for ref in graph.order if ref not in labeling and ref not in graph.hidden]
    if missing:
        raise LabelError(f"Labeling misses {len(missing)} observed nodes, e.g. {missing[0]}")

    energy = 0.0
    for ref, label in labeling.items():
        if ref not in graph.index:
            raise LabelError(f"Labeling references unknown node {ref}")
        i = graph.index[ref]
        if not (0 <= label < graph.label_set.count) or not graph.admissible[i, label]:
            raise LabelError(f"Label {label} is inadmissible at node {ref}")
        energy -= graph.unary[i, label]

    for edge in graph.edges:
        if edge.a in labeling and edge.b in labeling:
            energy += pairwise_cost(edge, labeling[edge.a], labeling[edge.b], weights)
    return float(energy)


def labeling_energies(graph: FusionGraph, tables: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vectorized energies of many dense labelings, ``labels`` shape (k, nodes)."""
    labels = np.asarray(labels, dtype=np.int64)
    nodes = np.arange(graph.node_count)
    with np.errstate(invalid="ignore"):
        energy = -graph.unary[nodes[None, :], labels].sum(axis=1)
    for e, (a, b) in enumerate(graph.endpoints):
        energy = energy + tables[e][labels[:, a], labels[:, b]]
    return energy
