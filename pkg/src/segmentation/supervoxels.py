"""
Supervoxel clustering of classified lidar points.

Points are voxelized, seeds are placed on a coarser grid, and voxels
repeatedly join the neighboring segment minimizing
``lambda * spatial distance + chi-squared(probability histograms)``.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import SegmentationError
from src.core.models import ProbabilityTable
from src.lidar.features import PointCloud


logger = logging.getLogger('obstacle_fusion.segmentation')

_FACE_OFFSETS = np.array([
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
], dtype=np.int64)


@dataclass(frozen=True)
class SupervoxelConfig:
    """Voxel and seed grid sizes (meters), spatial weight and refinement rounds."""
    voxel_resolution: float = 0.1
    seed_resolution: float = 0.2
    lambda_spatial: float = 1.0
    iterations: int = 10

    def __post_init__(self):
        """Validate ranges."""
        if not self.voxel_resolution > 0:
            raise SegmentationError("voxel_resolution must be positive")
        if self.seed_resolution < self.voxel_resolution:
            raise SegmentationError("seed_resolution must be at least voxel_resolution")
        if self.lambda_spatial < 0:
            raise SegmentationError("lambda_spatial must be nonnegative")
        if self.iterations < 1:
            raise SegmentationError("iterations must be positive")


@dataclass(frozen=True)
class Supervoxel:
    """One 3D segment of a frame."""
    id: int
    member_points: np.ndarray
    centroid: np.ndarray
    mean_probs: np.ndarray
    mean_normal_angle: Optional[float] = None


class Clustering(NamedTuple):
    supervoxels: List[Supervoxel]
    adjacency: List[Tuple[int, int]]
    point_segments: np.ndarray


def chi_squared(h: Sequence[float], g: Sequence[float]) -> float:
    """Chi-squared histogram distance, skipping bins empty in both.

    Raises:
        SegmentationError: length mismatch or negative entries
    """
    h = np.asarray(h, dtype=float)
    g = np.asarray(g, dtype=float)
    if h.shape != g.shape:
        raise SegmentationError(f"Histogram lengths differ: {h.shape} vs {g.shape}")
    if np.any(h < 0) or np.any(g < 0):
        raise SegmentationError("Histogram entries must be nonnegative")
    total = h + g
    nonzero = total > 0
    return float(np.sum((h[nonzero] - g[nonzero]) ** 2 / total[nonzero]))


def _chi_squared_rows(h: np.ndarray, rows: np.ndarray) -> np.ndarray:
    total = h[None, :] + rows
    diff = (h[None, :] - rows) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(total > 0, diff / total, 0.0).sum(axis=1)


def aggregate_probabilities(segment: Supervoxel, point_probs: ProbabilityTable) -> np.ndarray:
    """Mean of the member points' probability vectors, renormalized.

    Raises:
        SegmentationError: empty segment
    """
    members = np.asarray(segment.member_points, dtype=np.int64)
    if len(members) == 0:
        raise SegmentationError(f"Supervoxel {segment.id} has no member points")
    mean = point_probs.values[members].mean(axis=0)
    return mean / mean.sum()


class _VoxelGrid:
    """Occupied voxels with their statistics and face adjacency."""

    def __init__(self, xyz: np.ndarray, probs: np.ndarray, resolution: float):
        self.origin = xyz.min(axis=0)
        cells = np.floor((xyz - self.origin) / resolution).astype(np.int64)
        self.cells, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
        self.point_voxel = inverse.reshape(-1)
        self.counts = counts.astype(float)
        n = len(self.cells)

        self.centroids = np.column_stack([
            np.bincount(self.point_voxel, weights=xyz[:, k], minlength=n) for k in range(3)
        ]) / self.counts[:, None]
        self.hists = np.column_stack([
            np.bincount(self.point_voxel, weights=probs[:, k], minlength=n) for k in range(probs.shape[1])
        ]) / self.counts[:, None]

        lookup: Dict[Tuple[int, int, int], int] = {tuple(cell): i for i, cell in enumerate(self.cells.tolist())}
        self.neighbors: List[np.ndarray] = []
        for cell in self.cells:
            found = [lookup.get(tuple(cell + offset)) for offset in _FACE_OFFSETS]
            self.neighbors.append(np.array(sorted(i for i in found if i is not None), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.cells)


def _select_seeds(grid: _VoxelGrid, cfg: SupervoxelConfig) -> np.ndarray:
    """Per occupied seed cell, the voxel closest to the cell center."""
    voxel_centers = (grid.cells + 0.5) * cfg.voxel_resolution
    seed_cells = np.floor(voxel_centers / cfg.seed_resolution).astype(np.int64)
    unique_cells, group = np.unique(seed_cells, axis=0, return_inverse=True)
    group = group.reshape(-1)
    seed_centers = (unique_cells + 0.5) * cfg.seed_resolution
    distances = np.linalg.norm(voxel_centers - seed_centers[group], axis=1)

    seeds = np.empty(len(unique_cells), dtype=np.int64)
    for g in range(len(unique_cells)):
        members = np.flatnonzero(group == g)
        seeds[g] = members[np.argmin(distances[members])]
    return seeds


class _SegmentState:
    """Segment statistics recomputed from the current voxel assignment."""

    def __init__(self, grid: _VoxelGrid, seeds: np.ndarray):
        self.grid = grid
        self.assign = np.full(len(grid), -1, dtype=np.int64)
        self.assign[seeds] = np.arange(len(seeds))
        self.centroids = grid.centroids[seeds].copy()
        self.hists = grid.hists[seeds].copy()

    @property
    def count(self) -> int:
        return len(self.centroids)

    def add_seed(self, voxel: int) -> None:
        self.assign[voxel] = self.count
        self.centroids = np.vstack([self.centroids, self.grid.centroids[voxel]])
        self.hists = np.vstack([self.hists, self.grid.hists[voxel]])

    def update_means(self) -> None:
        assigned = self.assign >= 0
        seg = self.assign[assigned]
        weights = self.grid.counts[assigned]
        mass = np.bincount(seg, weights=weights, minlength=self.count)
        present = mass > 0
        for k in range(3):
            total = np.bincount(seg, weights=weights * self.grid.centroids[assigned, k], minlength=self.count)
            self.centroids[present, k] = total[present] / mass[present]
        for k in range(self.hists.shape[1]):
            total = np.bincount(seg, weights=weights * self.grid.hists[assigned, k], minlength=self.count)
            self.hists[present, k] = total[present] / mass[present]

    def round(self, lambda_spatial: float) -> int:
        """One synchronous reassignment of every voxel; returns the number of changes."""
        grid = self.grid
        new = self.assign.copy()
        for v in range(len(grid)):
            candidates = self.assign[grid.neighbors[v]]
            if self.assign[v] >= 0:
                candidates = np.append(candidates, self.assign[v])
            candidates = np.unique(candidates[candidates >= 0])
            if len(candidates) == 0:
                continue
            spatial = np.linalg.norm(self.centroids[candidates] - grid.centroids[v], axis=1)
            cost = lambda_spatial * spatial + _chi_squared_rows(grid.hists[v], self.hists[candidates])
            new[v] = candidates[int(np.argmin(cost))]
        changes = int(np.sum(new != self.assign))
        self.assign = new
        self.update_means()
        return changes


def cluster(cloud: PointCloud, point_probs: ProbabilityTable, cfg: SupervoxelConfig = SupervoxelConfig(),
            normal_angles: Optional[np.ndarray] = None) -> Clustering:
    """Cluster points into supervoxels.

    Args:
        cloud: Ground-aligned point cloud
        point_probs: Per-point probabilities, rows aligned with the cloud
        cfg: Grid sizes, spatial weight and number of refinement rounds
        normal_angles: Optional per-point normal angles averaged per segment

    Returns:
        Clustering with the supervoxels, their face adjacency (pairs with
        lower id first) and the segment id of every point

    Raises:
        SegmentationError: empty cloud or misaligned probabilities
    """
    if len(cloud) == 0:
        raise SegmentationError("Cannot cluster an empty point cloud")
    if len(point_probs) != len(cloud):
        raise SegmentationError(f"{len(point_probs)} probability rows for {len(cloud)} points")
    if normal_angles is not None and len(normal_angles) != len(cloud):
        raise SegmentationError("normal_angles must align with the cloud")

    grid = _VoxelGrid(cloud.xyz, point_probs.values, cfg.voxel_resolution)
    state = _SegmentState(grid, _select_seeds(grid, cfg))

    for _ in range(cfg.iterations):
        if state.round(cfg.lambda_spatial) == 0 and np.all(state.assign >= 0):
            break

    # keep growing until every occupied voxel is assigned; unreachable components get a seed
    while np.any(state.assign < 0):
        reachable = any(
            np.any(state.assign[grid.neighbors[v]] >= 0) for v in np.flatnonzero(state.assign < 0)
        )
        if not reachable:
            state.add_seed(int(np.flatnonzero(state.assign < 0)[0]))
        state.round(cfg.lambda_spatial)

    used, relabel = np.unique(state.assign, return_inverse=True)
    voxel_segment = relabel.reshape(-1)
    point_segments = voxel_segment[grid.point_voxel]

    supervoxels = []
    for segment_id in range(len(used)):
        members = np.flatnonzero(point_segments == segment_id)
        angle = None if normal_angles is None else float(np.mean(np.asarray(normal_angles)[members]))
        segment = Supervoxel(id=segment_id, member_points=members,
                             centroid=cloud.xyz[members].mean(axis=0),
                             mean_probs=np.zeros(point_probs.labels.count),
                             mean_normal_angle=angle)
        supervoxels.append(replace(segment, mean_probs=aggregate_probabilities(segment, point_probs)))

    pairs = set()
    for v in range(len(grid)):
        for u in grid.neighbors[v]:
            a, b = voxel_segment[v], voxel_segment[u]
            if a != b:
                pairs.add((int(min(a, b)), int(max(a, b))))
    adjacency = sorted(pairs)

    logger.debug(f"Clustered {len(cloud)} points in {len(grid)} voxels into {len(supervoxels)} supervoxels, "
                 f"{len(adjacency)} adjacencies")
    return Clustering(supervoxels, adjacency, point_segments)
