"""Translation-only coarse alignment on segmentation centers of mass.

The moving volumes are shifted so the moving mask's center of mass lands on
the world center of the target grid, then both sides are resampled onto that
grid. The target grid is centered on the fixed grid's world center.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, GridMismatchError
from .volume import Grid, ResampleMethod, Volume, resample_to_grid

logger = logging.getLogger(__name__)

DEFAULT_TARGET_DIMS = (96, 96, 80)
DEFAULT_TARGET_SPACING = 0.88


@dataclass
class PrealignResult:
    """Aligned volumes sharing ``grid``; images are None when not supplied."""

    translation: np.ndarray
    moving_mask_out: Volume
    fixed_mask_out: Volume
    moving_out: Optional[Volume] = None
    fixed_out: Optional[Volume] = None

    @property
    def grid(self) -> Grid:
        return self.fixed_mask_out.grid


def center_of_mass(mask: Volume) -> np.ndarray:
    """Value-weighted mean of the voxel-center world coordinates of a mask."""
    if not mask.is_mask:
        raise ValueError(f"center of mass needs a mask, got kind {mask.kind.value}")
    if mask.values.sum() <= 0.0:
        raise EmptyMaskError("center of mass of an empty mask is undefined")
    index = np.asarray(ndimage.center_of_mass(mask.values), dtype=np.float64)
    return mask.grid.index_to_world(index)


def _check_pair(image: Optional[Volume], mask: Volume, side: str) -> None:
    if image is not None and not image.grid.same_as(mask.grid):
        raise GridMismatchError(f"{side} image and mask live on different grids")


def target_grid(
    fixed_grid: Grid,
    target_dims: Sequence[int] = DEFAULT_TARGET_DIMS,
    target_spacing: Union[float, Sequence[float]] = DEFAULT_TARGET_SPACING,
) -> Grid:
    """Crop grid of ``target_dims`` voxels centered on the fixed grid."""
    return Grid.centered_on(fixed_grid.center, target_dims, target_spacing)


def coarse_align(
    moving: Optional[Volume],
    moving_mask: Volume,
    fixed: Optional[Volume],
    fixed_mask: Volume,
    target_dims: Sequence[int] = DEFAULT_TARGET_DIMS,
    target_spacing: Union[float, Sequence[float]] = DEFAULT_TARGET_SPACING,
) -> PrealignResult:
    """Translate the moving side onto the target-grid center and resample everything."""
    _check_pair(moving, moving_mask, "moving")
    _check_pair(fixed, fixed_mask, "fixed")

    target = target_grid(fixed_mask.grid, target_dims, target_spacing)
    translation = target.center - center_of_mass(moving_mask)
    logger.info(
        "Coarse alignment translation (%.3f, %.3f, %.3f) mm onto grid %s",
        *translation, target.dims,
    )

    linear = ResampleMethod.TRILINEAR
    return PrealignResult(
        translation=translation,
        moving_mask_out=resample_to_grid(moving_mask, target, linear, translation),
        fixed_mask_out=resample_to_grid(fixed_mask, target, linear),
        moving_out=None if moving is None else resample_to_grid(moving, target, linear, translation),
        fixed_out=None if fixed is None else resample_to_grid(fixed, target, linear),
    )
