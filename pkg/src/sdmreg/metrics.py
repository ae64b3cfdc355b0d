"""Registration quality metrics: overlap, landmark error and deformation smoothness."""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import EmptyMaskError, GridMismatchError
from .prealign import center_of_mass
from .volume import DisplacementField, Volume, VolumeKind, warp

logger = logging.getLogger(__name__)


@dataclass
class LandmarkSet:
    """Landmark masks keyed by id; moving and fixed sets pair by id."""

    landmarks: Dict[str, Volume] = field(default_factory=dict)

    def __post_init__(self):
        """Validate landmark masks."""
        for lm_id, mask in self.landmarks.items():
            if not mask.is_mask:
                raise ValueError(f"landmark '{lm_id}' is not a mask")
            if mask.values.sum() <= 0.0:
                raise EmptyMaskError(f"landmark '{lm_id}' is empty")

    @property
    def ids(self):
        return list(self.landmarks)

    def __len__(self) -> int:
        return len(self.landmarks)


@dataclass
class MetricsReport:
    dsc_whole: float
    dsc_base: float
    dsc_mid: float
    dsc_apex: float
    tre_mm: Optional[float]
    jac_grad: float
    folding_fraction: float

    @property
    def jac_grad_x100(self) -> float:
        """Jacobian gradient statistic in the x10^-2 display unit."""
        return 100.0 * self.jac_grad

    def to_dict(self) -> Dict[str, Optional[float]]:
        data = asdict(self)
        data["jac_grad_x100"] = self.jac_grad_x100
        return data


def _foreground(mask: Volume) -> np.ndarray:
    return mask.values > 0.5


def dice_binary(p: Volume, g: Volume) -> float:
    """Hard Dice overlap; two empty masks score 1."""
    if not p.grid.same_as(g.grid):
        raise GridMismatchError("Dice needs masks on the same grid")
    fp, fg = _foreground(p), _foreground(g)
    total = int(fp.sum()) + int(fg.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(fp, fg).sum()) / total


def region_split(mask: Volume, reference: Optional[Volume] = None) -> Tuple[Volume, Volume, Volume]:
    """Split ``mask`` into base/mid/apex thirds of the z-extent of a bounding box.

    The box is taken from ``reference`` (default: the mask itself), so two masks
    can be split at identical planes. Base holds the lowest z indices. The parts
    partition the mask exactly.
    """
    ref = mask if reference is None else reference
    if not ref.grid.same_as(mask.grid):
        raise GridMismatchError("region reference lives on a different grid")
    z_occupied = np.flatnonzero(_foreground(ref).any(axis=(0, 1)))
    if z_occupied.size == 0:
        raise EmptyMaskError("cannot split an empty mask into regions")

    z_min = int(z_occupied[0])
    n = int(z_occupied[-1]) - z_min + 1
    edges = (z_min + n // 3, z_min + (2 * n) // 3)
    z = np.arange(mask.grid.dims[2])
    selectors = (z < edges[0], (z >= edges[0]) & (z < edges[1]), z >= edges[1])

    fg = _foreground(mask)
    parts = []
    for sel in selectors:
        part = np.zeros(mask.grid.dims)
        part[:, :, sel] = fg[:, :, sel]
        parts.append(Volume(mask.grid, part, VolumeKind.BINARY_MASK))
    return tuple(parts)


def tre(moving_lms: LandmarkSet, fixed_lms: LandmarkSet, ddf: DisplacementField) -> float:
    """Mean distance (mm) between warped moving and fixed landmark centers of mass."""
    moving_ids, fixed_ids = set(moving_lms.landmarks), set(fixed_lms.landmarks)
    if moving_ids != fixed_ids:
        raise ValueError(f"unpaired landmark ids: {sorted(moving_ids ^ fixed_ids)}")
    if not moving_ids:
        raise ValueError("no landmark pairs to evaluate")

    distances = []
    for lm_id in fixed_lms.ids:
        warped = warp(moving_lms.landmarks[lm_id], ddf)
        if warped.values.sum() <= 0.0:
            raise EmptyMaskError(f"landmark '{lm_id}' has no mass after warping")
        d = np.linalg.norm(center_of_mass(warped) - center_of_mass(fixed_lms.landmarks[lm_id]))
        logger.debug("Landmark %s: %.3f mm", lm_id, d)
        distances.append(d)
    return float(np.mean(distances))


def jacobian_determinant(ddf: DisplacementField) -> np.ndarray:
    """det(I + du/dx) at every voxel from spacing-aware central differences."""
    spacing = ddf.grid.spacing
    jac = np.zeros(ddf.grid.dims + (3, 3))
    for c in range(3):
        for a in range(3):
            if ddf.grid.dims[a] > 1:
                jac[..., c, a] = np.gradient(ddf.vectors[..., c], spacing[a], axis=a)
        jac[..., c, c] += 1.0
    return np.linalg.det(jac)


def jacobian_grad_stat(ddf: DisplacementField) -> Tuple[float, float]:
    """Mean L2 norm of the gradient of det J and the folding fraction, interior voxels only."""
    if any(d < 3 for d in ddf.grid.dims):
        raise ValueError(f"Jacobian statistics need at least 3 voxels per axis, got {ddf.grid.dims}")
    det = jacobian_determinant(ddf)[1:-1, 1:-1, 1:-1]
    folding = float(np.mean(det <= 0.0))

    sq_norm = np.zeros(det.shape)
    for a, h in enumerate(ddf.grid.spacing):
        if det.shape[a] > 1:
            sq_norm += np.gradient(det, h, axis=a) ** 2
    return float(np.mean(np.sqrt(sq_norm))), folding


def evaluate_registration(
    moving_mask: Volume,
    fixed_mask: Volume,
    ddf: DisplacementField,
    moving_landmarks: Optional[LandmarkSet] = None,
    fixed_landmarks: Optional[LandmarkSet] = None,
) -> MetricsReport:
    """Whole and regional DSC, TRE (when landmarks are given) and Jacobian statistics."""
    warped = warp(moving_mask, ddf).binarize()
    fixed = fixed_mask if fixed_mask.kind is VolumeKind.BINARY_MASK else fixed_mask.binarize()

    fixed_regions = region_split(fixed)
    warped_regions = region_split(warped, reference=fixed)
    regional = [dice_binary(w, f) for w, f in zip(warped_regions, fixed_regions)]

    tre_mm = None
    if moving_landmarks is not None and fixed_landmarks is not None and len(fixed_landmarks):
        tre_mm = tre(moving_landmarks, fixed_landmarks, ddf)

    jac_grad, folding = jacobian_grad_stat(ddf)
    report = MetricsReport(
        dsc_whole=dice_binary(warped, fixed),
        dsc_base=regional[0],
        dsc_mid=regional[1],
        dsc_apex=regional[2],
        tre_mm=tre_mm,
        jac_grad=jac_grad,
        folding_fraction=folding,
    )
    logger.info(
        "DSC %.4f, TRE %s, jac_grad x100 %.3f, folding %.4f",
        report.dsc_whole,
        "n/a" if tre_mm is None else f"{tre_mm:.3f} mm",
        report.jac_grad_x100,
        folding,
    )
    return report
