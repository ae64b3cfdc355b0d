"""Intensity preprocessing applied before coarse alignment."""

import logging

import numpy as np

from .volume import Volume, VolumeKind

logger = logging.getLogger(__name__)

DEFAULT_PERCENTILE = 99.0


def normalize_intensity(vol: Volume, percentile: float = DEFAULT_PERCENTILE) -> Volume:
    """Scale magnitudes so the given percentile maps to 1, clamping to [0, 1].

    The percentile is taken over all voxels with linear interpolation. A
    non-positive percentile value yields an all-zero volume.
    """
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must lie in (0, 100], got {percentile}")
    if vol.is_mask:
        raise ValueError("intensity normalization applies to intensity volumes, not masks")

    q = float(np.percentile(vol.values, percentile))
    if q <= 0.0:
        logger.warning("Percentile %.1f of volume is %.3g, returning zeros", percentile, q)
        return Volume(vol.grid, np.zeros(vol.grid.dims), VolumeKind.INTENSITY)

    logger.debug("Normalizing intensities by p%.1f = %.6g", percentile, q)
    return Volume(vol.grid, np.clip(vol.values / q, 0.0, 1.0), VolumeKind.INTENSITY)
