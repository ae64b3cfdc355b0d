"""Multi-resolution additive displacement parameterization.

Level 0 is the coarsest. Level k of an L-level pyramid has spacing
``base_spacing * 2**(L-1-k)``, extents ``ceil(base_dims / 2**(L-1-k))`` and the
base origin. Composition upsamples the running sum to the next level and adds
that level's field; no magnitude rescaling is needed since fields are in mm.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import GridMismatchError
from .volume import DisplacementField, Grid, _clamp, _map

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = 5


def level_grid(base: Grid, level: int, num_levels: int) -> Grid:
    """Grid of pyramid ``level`` (0 = coarsest) for a base grid."""
    if not 0 <= level < num_levels:
        raise ValueError(f"level {level} outside [0, {num_levels})")
    factor = 2 ** (num_levels - 1 - level)
    dims = tuple(-(-d // factor) for d in base.dims)
    spacing = tuple(s * factor for s in base.spacing)
    return Grid(dims, spacing, base.origin)


def _check_finer(source: Grid, target: Grid) -> None:
    if any(t > s * (1.0 + 1e-9) for t, s in zip(target.spacing, source.spacing)):
        raise ValueError(
            f"target spacing {target.spacing} is coarser than source spacing {source.spacing}"
        )


def _upsample_coordinates(source: Grid, target: Grid) -> np.ndarray:
    _check_finer(source, target)
    return _clamp(source.world_to_index(target.world_coordinates()), source.dims)


def upsample_ddf(coarse: DisplacementField, target: Grid) -> DisplacementField:
    """Trilinearly resample each component of ``coarse`` onto the finer ``target`` grid."""
    if target.same_as(coarse.grid):
        return DisplacementField(target, coarse.vectors.copy())
    coords = _upsample_coordinates(coarse.grid, target)
    vectors = np.stack([_map(coarse.vectors[..., c], coords, order=1) for c in range(3)], axis=-1)
    return DisplacementField(target, vectors)


@dataclass
class DdfPyramid:
    """One displacement field per level, coarsest first, composed additively."""

    base_grid: Grid
    levels: List[DisplacementField] = field(default_factory=list)

    def __post_init__(self):
        """Check every level sits on its expected grid."""
        if not self.levels:
            raise ValueError("a pyramid needs at least one level")
        for k, level in enumerate(self.levels):
            expected = level_grid(self.base_grid, k, len(self.levels))
            if not level.grid.same_as(expected):
                raise GridMismatchError(
                    f"level {k} grid {level.grid} does not match expected {expected}"
                )

    @classmethod
    def zeros(cls, base_grid: Grid, num_levels: int = DEFAULT_LEVELS) -> "DdfPyramid":
        if num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        levels = [
            DisplacementField.zeros(level_grid(base_grid, k, num_levels)) for k in range(num_levels)
        ]
        return cls(base_grid, levels)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def grids(self) -> List[Grid]:
        return [level.grid for level in self.levels]

    def with_level(self, k: int, vectors: np.ndarray) -> "DdfPyramid":
        levels = list(self.levels)
        levels[k] = DisplacementField(levels[k].grid, vectors)
        return DdfPyramid(self.base_grid, levels)

    def __add__(self, other: "DdfPyramid") -> "DdfPyramid":
        if other.num_levels != self.num_levels or not other.base_grid.same_as(self.base_grid):
            raise GridMismatchError("pyramids have different structure")
        return DdfPyramid(self.base_grid, [a + b for a, b in zip(self.levels, other.levels)])


def compose_pyramid(pyr: DdfPyramid) -> DisplacementField:
    """Full-resolution DDF: upsample the running sum level by level and add."""
    running = DisplacementField(pyr.levels[0].grid, pyr.levels[0].vectors.copy())
    for level in pyr.levels[1:]:
        upsampled = upsample_ddf(running, level.grid)
        running = DisplacementField(level.grid, upsampled.vectors + level.vectors)
    return running


def _axis_matrix(source: Grid, target: Grid, axis: int) -> np.ndarray:
    """(target_n, source_n) clamp-to-edge linear interpolation along one axis."""
    n_source = source.dims[axis]
    positions = target.origin[axis] + np.arange(target.dims[axis]) * target.spacing[axis]
    coords = np.clip((positions - source.origin[axis]) / source.spacing[axis], 0.0, n_source - 1.0)
    lo = np.minimum(np.floor(coords).astype(np.int64), max(n_source - 2, 0))
    hi = np.minimum(lo + 1, n_source - 1)
    frac = coords - lo
    rows = np.arange(target.dims[axis])
    matrix = np.zeros((target.dims[axis], n_source))
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix


def _apply_separable(matrices: Sequence[np.ndarray], values: np.ndarray) -> np.ndarray:
    out = values
    for axis, matrix in enumerate(matrices):
        out = np.moveaxis(np.tensordot(matrix, out, axes=(1, axis)), 0, axis)
    return np.ascontiguousarray(out)


class PyramidOperator:
    """Linear composition map of a pyramid and its exact transpose.

    Trilinear upsampling between axis-aligned grids factors into one 1D
    interpolation matrix per axis. The matrices are built once, so the optimizer
    composes level arrays and pulls full-resolution gradients back onto every
    level with three small matrix products per stage.
    """

    def __init__(self, base_grid: Grid, num_levels: int = DEFAULT_LEVELS):
        if num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        self.base_grid = base_grid
        self.num_levels = num_levels
        self.grids = [level_grid(base_grid, k, num_levels) for k in range(num_levels)]
        self._matrices: List[List[np.ndarray]] = []
        for coarse, fine in zip(self.grids[:-1], self.grids[1:]):
            _check_finer(coarse, fine)
            self._matrices.append([_axis_matrix(coarse, fine, a) for a in range(3)])
        logger.debug(
            "Pyramid levels: %s", ", ".join(str(g.dims) for g in self.grids)
        )

    def zeros(self) -> List[np.ndarray]:
        return [np.zeros(g.dims + (3,)) for g in self.grids]

    def _upsample(self, k: int, vectors: np.ndarray) -> np.ndarray:
        return _apply_separable(self._matrices[k], vectors)

    def _upsample_adjoint(self, k: int, upstream: np.ndarray) -> np.ndarray:
        return _apply_separable([m.T for m in self._matrices[k]], upstream)

    def compose(self, levels: Sequence[np.ndarray]) -> np.ndarray:
        """Full-resolution vectors (dims + (3,)) from per-level arrays."""
        if len(levels) != self.num_levels:
            raise ValueError(f"expected {self.num_levels} level arrays, got {len(levels)}")
        running = np.asarray(levels[0], dtype=np.float64)
        for k in range(1, self.num_levels):
            running = self._upsample(k - 1, running) + levels[k]
        return running

    def adjoint(self, grad: np.ndarray) -> List[np.ndarray]:
        """Per-level gradients from a full-resolution gradient (transpose of compose)."""
        grads: List[np.ndarray] = [np.empty(0)] * self.num_levels
        running = np.asarray(grad, dtype=np.float64)
        grads[-1] = running
        for k in range(self.num_levels - 1, 0, -1):
            running = self._upsample_adjoint(k - 1, running)
            grads[k - 1] = running
        return grads

    def to_pyramid(self, levels: Sequence[np.ndarray]) -> DdfPyramid:
        return DdfPyramid(
            self.base_grid,
            [DisplacementField(g, np.asarray(v)) for g, v in zip(self.grids, levels)],
        )
