"""Learnable CRF parameters: label-pair weight and bias matrices per edge family."""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.core.exceptions import LabelError
from src.core.models import EdgeKind


# (weight field, bias field) per edge family, in parameter-vector order.
KIND_FIELDS: Dict[EdgeKind, Tuple[str, str]] = {
    EdgeKind.SPATIAL_2D: ("w2d", "b2d"),
    EdgeKind.SPATIAL_3D: ("w3d", "b3d"),
    EdgeKind.CROSS_MODAL: ("w2d3d", "b2d3d"),
    EdgeKind.TEMPORAL: ("wtime", "btime"),
}
MATRIX_FIELDS = ("w2d", "w3d", "w2d3d", "wtime", "b2d", "b3d", "b2d3d", "btime")
SYMMETRIC_FIELDS = frozenset({"w2d", "w3d", "wtime", "b2d", "b3d", "btime"})


@dataclass(frozen=True)
class ParameterSlot:
    """One free parameter: matrix field and (row, column)."""
    field: str
    row: int
    col: int

    @property
    def tied(self) -> bool:
        return self.field in SYMMETRIC_FIELDS

    @property
    def is_bias(self) -> bool:
        return self.field.startswith("b")


def parameter_layout(count: int) -> List[ParameterSlot]:
    """Free parameters in vector order: upper triangle for symmetric matrices,
    every off-diagonal entry for the cross-modal ones."""
    slots: List[ParameterSlot] = []
    for kind in KIND_FIELDS:
        for name in KIND_FIELDS[kind]:
            for i in range(count):
                for j in range(count):
                    if i == j:
                        continue
                    if name in SYMMETRIC_FIELDS and j < i:
                        continue
                    slots.append(ParameterSlot(name, i, j))
    return slots


@dataclass
class WeightSet:
    """Pairwise CRF weights.

    Symmetric families (2D, 3D, temporal) hold symmetric matrices; the
    cross-modal family is indexed ``[2D label][3D label]``. All diagonals
    are zero.
    """
    w2d: np.ndarray
    w3d: np.ndarray
    w2d3d: np.ndarray
    wtime: np.ndarray
    b2d: np.ndarray
    b3d: np.ndarray
    b2d3d: np.ndarray
    btime: np.ndarray
    l2_lambda: float = 0.0
    labels: Optional[Tuple[str, ...]] = field(default=None, compare=False)

    def __post_init__(self):
        """Coerce matrices and validate structure."""
        for name in MATRIX_FIELDS:
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        self.validate()

    @property
    def count(self) -> int:
        return self.w2d.shape[0]

    def validate(self) -> None:
        """Check shapes, zero diagonals and symmetry.

        Raises:
            LabelError: if the structure is violated
        """
        if self.l2_lambda < 0:
            raise LabelError("l2_lambda must be nonnegative")
        n = self.w2d.shape[0] if self.w2d.ndim == 2 else -1
        for name in MATRIX_FIELDS:
            matrix = getattr(self, name)
            if matrix.shape != (n, n):
                raise LabelError(f"{name} must be a square {n}x{n} matrix, got {matrix.shape}")
            if np.any(np.diag(matrix) != 0.0):
                raise LabelError(f"{name} must have an exactly zero diagonal")
            if name in SYMMETRIC_FIELDS and not np.array_equal(matrix, matrix.T):
                raise LabelError(f"{name} must be symmetric")

    def for_kind(self, kind: EdgeKind) -> Tuple[np.ndarray, np.ndarray]:
        """(weight matrix, bias matrix) of one edge family."""
        w_name, b_name = KIND_FIELDS[kind]
        return getattr(self, w_name), getattr(self, b_name)

    @classmethod
    def zeros(cls, count: int, l2_lambda: float = 0.0,
              labels: Optional[Tuple[str, ...]] = None) -> "WeightSet":
        matrices = {name: np.zeros((count, count)) for name in MATRIX_FIELDS}
        return cls(l2_lambda=l2_lambda, labels=labels, **matrices)

    @classmethod
    def random(cls, count: int, rng: np.random.Generator, scale: float = 1.0,
               bias_scale: float = 0.0, l2_lambda: float = 0.0) -> "WeightSet":
        """Random weights with the required structure."""
        slots = parameter_layout(count)
        vector = np.array([
            rng.normal(0.0, bias_scale if slot.is_bias else scale) for slot in slots
        ])
        return cls.from_vector(vector, count, l2_lambda=l2_lambda)

    def to_vector(self) -> np.ndarray:
        """Free parameters in ``parameter_layout`` order."""
        return np.array([getattr(self, s.field)[s.row, s.col] for s in parameter_layout(self.count)])

    @classmethod
    def from_vector(cls, vector: np.ndarray, count: int, l2_lambda: float = 0.0,
                    labels: Optional[Tuple[str, ...]] = None) -> "WeightSet":
        """Inverse of ``to_vector``; symmetric partners are filled in."""
        matrices = {name: np.zeros((count, count)) for name in MATRIX_FIELDS}
        slots = parameter_layout(count)
        if len(vector) != len(slots):
            raise LabelError(f"Expected {len(slots)} parameters, got {len(vector)}")
        for value, slot in zip(vector, slots):
            matrices[slot.field][slot.row, slot.col] = value
            if slot.tied:
                matrices[slot.field][slot.col, slot.row] = value
        return cls(l2_lambda=l2_lambda, labels=labels, **matrices)

    def non_bias_mask(self) -> np.ndarray:
        """Boolean mask over the parameter vector selecting regularized entries."""
        return np.array([not s.is_bias for s in parameter_layout(self.count)])

    def with_lambda(self, l2_lambda: float) -> "WeightSet":
        return replace(self, l2_lambda=l2_lambda)

    def max_abs(self, include_bias: bool = True) -> float:
        names = MATRIX_FIELDS if include_bias else MATRIX_FIELDS[:4]
        return float(max(np.abs(getattr(self, name)).max() for name in names))
