"""Mask and field builders shared by the test modules."""

from typing import Sequence

import numpy as np

from src.sdmreg.volume import Grid, Volume, VolumeKind


def ball_mask(grid: Grid, center: Sequence[float], radius: float) -> Volume:
    """Binary ball of ``radius`` mm around a world point."""
    dist = np.linalg.norm(grid.world_coordinates() - np.asarray(center, dtype=np.float64), axis=-1)
    return Volume(grid, (dist <= radius).astype(np.float64), VolumeKind.BINARY_MASK)


def box_mask(grid: Grid, lo: Sequence[int], hi: Sequence[int]) -> Volume:
    """Binary box covering voxel indices lo..hi inclusive."""
    values = np.zeros(grid.dims)
    values[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = 1.0
    return Volume(grid, values, VolumeKind.BINARY_MASK)


def random_blob(grid: Grid, rng: np.random.Generator) -> Volume:
    """Union of two random balls kept away from the grid border."""
    dims = np.asarray(grid.dims, dtype=np.float64)
    values = np.zeros(grid.dims)
    for _ in range(2):
        center = rng.uniform(0.35, 0.65, size=3) * (dims - 1)
        radius = rng.uniform(2.0, 3.5)
        values = np.maximum(values, ball_mask(grid, grid.index_to_world(center), radius).values)
    return Volume(grid, values, VolumeKind.BINARY_MASK)


def com_index(mask: Volume) -> np.ndarray:
    coords = mask.grid.index_coordinates().reshape(-1, 3)
    weights = mask.values.reshape(-1)
    return (coords * weights[:, None]).sum(axis=0) / weights.sum()
