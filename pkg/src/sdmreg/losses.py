"""Registration objective and its analytic gradient w.r.t. the full-resolution DDF.

total = alpha * (1 - mDSC) + beta * MSLE(SDM) + gamma * bending, gamma = 1 - alpha - beta.

Gaussian sigmas are in voxels. Smoothing renormalizes the kernel at the volume
borders, so constants are preserved. The objective folds smoothing and its
explicit transpose into per-level Dice operators built once per pair.
"""

import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import GridMismatchError
from .volume import DisplacementField, Volume, VolumeKind, warp_stencil

logger = logging.getLogger(__name__)

DICE_EPS = 1e-7
DEFAULT_SIGMAS = (0.0, 1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class LossWeights:
    """Term weights; bending energy gets the remainder gamma = 1 - alpha - beta."""

    alpha: float = 0.05
    beta: float = 0.45

    def __post_init__(self):
        """Validate configuration."""
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.alpha + self.beta > 1.0 + 1e-12:
            raise ValueError("alpha + beta must not exceed 1")

    @property
    def gamma(self) -> float:
        return max(0.0, 1.0 - self.alpha - self.beta)


MODE_PRESETS: Dict[str, LossWeights] = {
    "mdsc": LossWeights(alpha=0.3, beta=0.0),
    "sdm": LossWeights(alpha=0.0, beta=0.8),
    "mix": LossWeights(alpha=0.05, beta=0.45),
}


def weights_for_mode(mode: str) -> LossWeights:
    """Loss weights of a named mode (mdsc, sdm or mix)."""
    try:
        return MODE_PRESETS[mode.lower()]
    except KeyError:
        raise ValueError(f"Unknown loss mode '{mode}', expected one of {sorted(MODE_PRESETS)}")


@dataclass(frozen=True)
class SigmaSchedule:
    """Gaussian widths (voxels) of the multiscale Dice; 0 means no smoothing."""

    sigmas: Tuple[float, ...] = DEFAULT_SIGMAS

    def __post_init__(self):
        """Validate configuration."""
        sigmas = tuple(float(s) for s in self.sigmas)
        if not sigmas:
            raise ValueError("sigma schedule must contain at least one level")
        if any(s < 0 or not math.isfinite(s) for s in sigmas):
            raise ValueError(f"sigmas must be finite and >= 0, got {sigmas}")
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def z(self) -> int:
        return len(self.sigmas)


@dataclass
class LossBreakdown:
    total: float
    mdsc: float
    msle: float
    bending: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@lru_cache(maxsize=32)
def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized sampled Gaussian of radius ceil(3 * sigma). Read-only."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    kernel.setflags(write=False)
    return kernel


@lru_cache(maxsize=64)
def _border_norm(length: int, sigma: float, axis: int) -> np.ndarray:
    norm = ndimage.correlate1d(np.ones(length), gaussian_kernel(sigma), mode="constant", cval=0.0)
    shape = [1, 1, 1]
    shape[axis] = length
    norm = norm.reshape(shape)
    norm.setflags(write=False)
    return norm


def smooth_array(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with per-axis kernel renormalization at borders."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return values
    sigma = float(sigma)
    kernel = gaussian_kernel(sigma)
    out = np.asarray(values, dtype=np.float64)
    for axis in range(3):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
        out /= _border_norm(out.shape[axis], sigma, axis)
    return out


def smooth_array_adjoint(upstream: np.ndarray, sigma: float) -> np.ndarray:
    """Transpose of :func:`smooth_array`."""
    if sigma == 0:
        return upstream
    sigma = float(sigma)
    kernel = gaussian_kernel(sigma)
    out = np.asarray(upstream, dtype=np.float64)
    for axis in (2, 1, 0):
        out = out / _border_norm(out.shape[axis], sigma, axis)
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
    return out


def gaussian_smooth(mask: Volume, sigma: float) -> Volume:
    """Gaussian-smoothed mask; sigma = 0 returns the input unchanged."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return mask
    kind = VolumeKind.SOFT_MASK if mask.is_mask else mask.kind
    return Volume(mask.grid, smooth_array(mask.values, sigma), kind)


def _check_same_grid(a: Volume, b: Volume) -> None:
    if not a.grid.same_as(b.grid):
        raise GridMismatchError(f"volumes live on different grids: {a.grid} vs {b.grid}")


def _dice(p: np.ndarray, g: np.ndarray) -> float:
    return float(2.0 * (p * g).sum() / (p.sum() + g.sum() + DICE_EPS))


def _msle(p_hat: np.ndarray, g_hat: np.ndarray) -> Tuple[float, np.ndarray]:
    p_pos = np.maximum(p_hat, 0.0)
    diff = np.log1p(p_pos) - np.log1p(np.maximum(g_hat, 0.0))
    n = diff.size
    value = float(np.mean(diff * diff))
    grad = np.where(p_hat > 0.0, 2.0 * diff / (n * (1.0 + p_pos)), 0.0)
    return value, grad


def soft_dice(p: Volume, g: Volume) -> float:
    """2 * sum(p*g) / (sum(p) + sum(g) + eps)."""
    _check_same_grid(p, g)
    return _dice(p.values, g.values)


def multiscale_dice(p: Volume, g: Volume, sched: SigmaSchedule = SigmaSchedule()) -> float:
    """Mean soft Dice over the Gaussian smoothing levels of ``sched``."""
    _check_same_grid(p, g)
    scores = [
        _dice(smooth_array(p.values, s), smooth_array(g.values, s)) for s in sched.sigmas
    ]
    return float(np.mean(scores))


def msle_sdm(p_hat: Volume, g_hat: Volume) -> float:
    """Mean squared log error of the positive (exterior) sides of two SDMs."""
    _check_same_grid(p_hat, g_hat)
    return _msle(p_hat.values, g_hat.values)[0]


Stencil = List[Tuple[Tuple[int, int, int], float]]


def _bending_terms(spacing: Sequence[float], cross_terms: bool) -> List[Tuple[float, Stencil]]:
    """(weight, stencil) pairs of the second-derivative terms."""
    unit = [np.eye(3, dtype=int)[a] for a in range(3)]
    terms: List[Tuple[float, Stencil]] = []
    for a in range(3):
        h2 = spacing[a] ** 2
        e = tuple(unit[a])
        neg = tuple(-unit[a])
        terms.append((1.0, [(neg, 1.0 / h2), ((0, 0, 0), -2.0 / h2), (e, 1.0 / h2)]))
    if cross_terms:
        for a, b in ((0, 1), (0, 2), (1, 2)):
            c = 1.0 / (4.0 * spacing[a] * spacing[b])
            ea, eb = unit[a], unit[b]
            terms.append((2.0, [
                (tuple(ea + eb), c), (tuple(ea - eb), -c),
                (tuple(-ea + eb), -c), (tuple(-ea - eb), c),
            ]))
    return terms


def _shifted(shape: Sequence[int], offset: Tuple[int, int, int]) -> Tuple[slice, ...]:
    return tuple(slice(1 + o, n - 1 + o) for n, o in zip(shape[:3], offset))


def _apply_stencil(u: np.ndarray, stencil: Stencil) -> np.ndarray:
    out = None
    for offset, coeff in stencil:
        term = coeff * u[_shifted(u.shape, offset)]
        out = term if out is None else out + term
    return out


def _stencil_adjoint(r: np.ndarray, stencil: Stencil, shape: Sequence[int]) -> np.ndarray:
    out = np.zeros(shape)
    for offset, coeff in stencil:
        out[_shifted(shape, offset)] += coeff * r
    return out


def _check_bending_dims(ddf: DisplacementField) -> int:
    if any(d < 3 for d in ddf.grid.dims):
        raise ValueError(f"bending energy needs at least 3 voxels per axis, got {ddf.grid.dims}")
    return int(np.prod([d - 2 for d in ddf.grid.dims]))


def bending_energy(ddf: DisplacementField, cross_terms: bool = False) -> float:
    """Mean over interior voxels and components of the squared second derivatives."""
    n_interior = _check_bending_dims(ddf)
    energy = 0.0
    for weight, stencil in _bending_terms(ddf.grid.spacing, cross_terms):
        r = _apply_stencil(ddf.vectors, stencil)
        energy += weight * float(np.sum(r * r))
    return energy / (3.0 * n_interior)


def bending_energy_grad(
    ddf: DisplacementField, cross_terms: bool = False
) -> Tuple[float, np.ndarray]:
    """Bending energy and its gradient w.r.t. every displacement component."""
    n_interior = _check_bending_dims(ddf)
    scale = 1.0 / (3.0 * n_interior)
    energy = 0.0
    grad = np.zeros(ddf.vectors.shape)
    for weight, stencil in _bending_terms(ddf.grid.spacing, cross_terms):
        r = _apply_stencil(ddf.vectors, stencil)
        energy += weight * float(np.sum(r * r))
        grad += (2.0 * weight * scale) * _stencil_adjoint(r, stencil, ddf.vectors.shape)
    return energy * scale, grad


class RegistrationObjective:
    """Objective of one moving/fixed pair.

    Smoothing is linear, so every Dice level reduces to two dot products with
    the warped mask p: sum(S p * S g) = <S^T S g, p> and sum(S p) = <S^T 1, p>.
    Both operators are built once here and no smoothing runs per iteration.
    The warped mask and SDM are read through one shared interpolation stencil.
    """

    def __init__(
        self,
        moving_mask: Volume,
        fixed_mask: Volume,
        moving_sdm: Volume,
        fixed_sdm: Volume,
        weights: LossWeights,
        sched: SigmaSchedule = SigmaSchedule(),
        cross_terms: bool = False,
    ):
        _check_same_grid(fixed_mask, fixed_sdm)
        _check_same_grid(moving_mask, moving_sdm)
        self.moving_mask = moving_mask
        self.moving_sdm = moving_sdm
        self.fixed_grid = fixed_mask.grid
        self.weights = weights
        self.sched = sched
        self.cross_terms = cross_terms

        fixed = fixed_mask.values
        ones = np.ones(fixed.shape)
        smoothed = [smooth_array(fixed, s) for s in sched.sigmas]
        self._overlap_op = np.stack(
            [smooth_array_adjoint(g, s).ravel() for g, s in zip(smoothed, sched.sigmas)]
        )
        self._mass_op = np.stack([smooth_array_adjoint(ones, s).ravel() for s in sched.sigmas])
        self._fixed_mass = np.array([float(g.sum()) for g in smoothed])
        self._fixed_sdm = fixed_sdm.values.ravel()

        # channel 0 mask, channel 1 SDM
        self._moving = np.stack([moving_mask.values, moving_sdm.values], axis=-1)

    def _check_ddf(self, ddf: DisplacementField) -> None:
        if not ddf.grid.same_as(self.fixed_grid):
            raise GridMismatchError("displacement field must live on the fixed grid")

    def _combine(self, mdsc: float, msle: float, bending: float) -> LossBreakdown:
        w = self.weights
        total = w.alpha * (1.0 - mdsc) + w.beta * msle + w.gamma * bending
        return LossBreakdown(total=float(total), mdsc=mdsc, msle=msle, bending=bending)

    def _warped(self, ddf: DisplacementField, with_gradient: bool):
        """Warped (mask, SDM) as (N, 2) and, on request, their gradients per mm, (N, 2, 3)."""
        grid = self.moving_mask.grid
        stencil = warp_stencil(grid, ddf)
        if not with_gradient:
            return stencil.interpolate(self._moving), None
        values, grads = stencil.interpolate(self._moving, with_gradient=True)
        return values, grads / np.asarray(grid.spacing)

    def _multiscale_dice(self, p: np.ndarray) -> Tuple[float, np.ndarray]:
        """Mean Dice over the schedule and its gradient w.r.t. the flat warped mask."""
        overlap = self._overlap_op @ p
        denom = self._mass_op @ p + self._fixed_mass + DICE_EPS
        scores = 2.0 * overlap / denom
        z = self.sched.z
        grad = (2.0 / denom / z) @ self._overlap_op - (2.0 * overlap / denom ** 2 / z) @ self._mass_op
        return float(np.mean(scores)), grad

    def evaluate(self, ddf: DisplacementField) -> LossBreakdown:
        self._check_ddf(ddf)
        warped, _ = self._warped(ddf, with_gradient=False)
        mdsc = self._multiscale_dice(warped[:, 0])[0]
        msle = _msle(warped[:, 1], self._fixed_sdm)[0]
        bending = bending_energy(ddf, self.cross_terms)
        return self._combine(mdsc, msle, bending)

    def evaluate_with_grad(self, ddf: DisplacementField) -> Tuple[LossBreakdown, np.ndarray]:
        """Loss breakdown and d(total)/d(ddf), shape dims + (3,)."""
        self._check_ddf(ddf)
        w = self.weights
        warped, spatial = self._warped(ddf, with_gradient=True)
        mdsc, dice_upstream = self._multiscale_dice(warped[:, 0])
        msle, msle_upstream = _msle(warped[:, 1], self._fixed_sdm)
        bending, bending_grad = bending_energy_grad(ddf, self.cross_terms)

        grad = np.zeros(spatial.shape[:1] + (3,))
        if w.alpha > 0:
            grad += spatial[:, 0] * (-w.alpha * dice_upstream)[:, None]
        if w.beta > 0:
            grad += spatial[:, 1] * (w.beta * msle_upstream)[:, None]
        grad = grad.reshape(ddf.grid.dims + (3,))
        if w.gamma > 0:
            grad += w.gamma * bending_grad
        return self._combine(mdsc, msle, bending), grad


def total_loss(
    moving_mask: Volume,
    fixed_mask: Volume,
    moving_sdm: Volume,
    fixed_sdm: Volume,
    ddf: DisplacementField,
    weights: LossWeights,
    sched: SigmaSchedule = SigmaSchedule(),
    cross_terms: bool = False,
) -> LossBreakdown:
    """Weighted objective of warping the moving mask and SDM by ``ddf``."""
    objective = RegistrationObjective(
        moving_mask, fixed_mask, moving_sdm, fixed_sdm, weights, sched, cross_terms
    )
    return objective.evaluate(ddf)


def total_loss_grad(
    moving_mask: Volume,
    fixed_mask: Volume,
    moving_sdm: Volume,
    fixed_sdm: Volume,
    ddf: DisplacementField,
    weights: LossWeights,
    sched: SigmaSchedule = SigmaSchedule(),
    cross_terms: bool = False,
) -> Tuple[LossBreakdown, np.ndarray]:
    """Objective breakdown and its gradient w.r.t. every voxel of ``ddf``."""
    objective = RegistrationObjective(
        moving_mask, fixed_mask, moving_sdm, fixed_sdm, weights, sched, cross_terms
    )
    return objective.evaluate_with_grad(ddf)
