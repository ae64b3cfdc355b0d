"""Grids, scalar volumes, displacement fields and trilinear sampling.

Voxel values live at voxel centers and ``world(i, j, k) = origin + (i, j, k) * spacing``.
Arrays are indexed ``[x, y, z]``; flat (serialized) order is x fastest.
Displacements are stored in millimeters at every resolution.
"""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import GridMismatchError, NonFiniteError

logger = logging.getLogger(__name__)

Vector3 = Tuple[float, float, float]

_GRID_TOL = 1e-9
_SOFT_TOL = 1e-9
_CORNERS = tuple(itertools.product((0, 1), repeat=3))


class VolumeKind(Enum):
    """Semantic tag of the scalars stored in a volume."""
    INTENSITY = "intensity"
    SOFT_MASK = "soft-mask"
    BINARY_MASK = "binary-mask"
    SDM_MM = "sdm-mm"


class ResampleMethod(Enum):
    TRILINEAR = "trilinear"
    NEAREST = "nearest"


@dataclass(frozen=True)
class Grid:
    """Axis-aligned geometric frame shared by volumes and displacement fields."""

    dims: Tuple[int, int, int]
    spacing: Vector3 = (1.0, 1.0, 1.0)
    origin: Vector3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        """Normalize to tuples and validate."""
        if len(self.dims) != 3 or len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValueError("Grid needs three dims, spacing and origin components")
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if any(d < 1 for d in dims):
            raise ValueError(f"Grid dims must be >= 1, got {dims}")
        if any(not (np.isfinite(s) and s > 0) for s in spacing):
            raise ValueError(f"Grid spacing must be positive, got {spacing}")
        if not all(np.isfinite(o) for o in origin):
            raise ValueError(f"Grid origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def centered_on(
        cls, center: Sequence[float], dims: Sequence[int], spacing: Union[float, Sequence[float]]
    ) -> "Grid":
        """Grid of ``dims`` voxels whose world center is ``center``."""
        spacing_arr = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
        dims_arr = np.asarray(dims, dtype=np.float64)
        origin = np.asarray(center, dtype=np.float64) - 0.5 * (dims_arr - 1.0) * spacing_arr
        return cls(tuple(dims), tuple(spacing_arr), tuple(origin))

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def center(self) -> np.ndarray:
        """World position of the grid center."""
        return np.asarray(self.origin) + 0.5 * (np.asarray(self.dims) - 1.0) * np.asarray(self.spacing)

    @property
    def extent(self) -> np.ndarray:
        """World extent in mm covered by the voxels (dims * spacing)."""
        return np.asarray(self.dims) * np.asarray(self.spacing)

    def same_as(self, other: "Grid") -> bool:
        """True when both grids describe the same voxel lattice."""
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=_GRID_TOL, atol=_GRID_TOL)
            and np.allclose(self.origin, other.origin, rtol=_GRID_TOL, atol=_GRID_TOL)
        )

    def index_to_world(self, index: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=np.float64) * np.asarray(self.spacing)

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Continuous voxel indices of world points (no clamping)."""
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def world_coordinates(self) -> np.ndarray:
        """Read-only array of shape dims + (3,) holding voxel-center world points."""
        return _world_coordinates(self)

    def index_coordinates(self) -> np.ndarray:
        """Read-only array of shape dims + (3,) holding integer voxel indices."""
        return _index_coordinates(self.dims)


@lru_cache(maxsize=16)
def _world_coordinates(grid: Grid) -> np.ndarray:
    axes = [grid.origin[a] + np.arange(grid.dims[a]) * grid.spacing[a] for a in range(3)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    mesh.setflags(write=False)
    return mesh


@lru_cache(maxsize=16)
def _index_coordinates(dims: Tuple[int, int, int]) -> np.ndarray:
    axes = [np.arange(d, dtype=np.float64) for d in dims]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    mesh.setflags(write=False)
    return mesh


@dataclass
class Volume:
    """Scalar field on a grid. Treated as immutable once constructed."""

    grid: Grid
    values: np.ndarray
    kind: VolumeKind = VolumeKind.INTENSITY

    def __post_init__(self):
        """Coerce values to a float64 ``dims``-shaped array and check the kind."""
        if isinstance(self.kind, str):
            self.kind = VolumeKind(self.kind)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            if values.size != self.grid.size:
                raise GridMismatchError(
                    f"{values.size} values do not fill a grid of dims {self.grid.dims}"
                )
            values = values.reshape(self.grid.dims, order="F")
        if values.shape != self.grid.dims:
            raise GridMismatchError(f"values shape {values.shape} != grid dims {self.grid.dims}")
        self.values = np.ascontiguousarray(values)

        if self.kind is VolumeKind.BINARY_MASK:
            if not np.all((self.values == 0.0) | (self.values == 1.0)):
                raise ValueError("binary-mask values must be 0 or 1")
        elif self.kind is VolumeKind.SOFT_MASK:
            if self.values.min() < -_SOFT_TOL or self.values.max() > 1.0 + _SOFT_TOL:
                raise ValueError("soft-mask values must lie in [0, 1]")

    @property
    def is_mask(self) -> bool:
        return self.kind in (VolumeKind.BINARY_MASK, VolumeKind.SOFT_MASK)

    def flat(self) -> np.ndarray:
        """Values in serialization order (x fastest)."""
        return self.values.ravel(order="F")

    def binarize(self, threshold: float = 0.5) -> "Volume":
        return Volume(self.grid, (self.values >= threshold).astype(np.float64), VolumeKind.BINARY_MASK)


@dataclass
class DisplacementField:
    """Per-voxel 3-vectors (mm) mapping fixed-grid voxels to moving sample points."""

    grid: Grid
    vectors: np.ndarray

    def __post_init__(self):
        """Coerce to a float64 dims + (3,) array and reject non-finite components."""
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim == 2 and vectors.shape == (self.grid.size, 3):
            nx, ny, nz = self.grid.dims
            vectors = vectors.reshape((nz, ny, nx, 3)).transpose(2, 1, 0, 3)
        expected = self.grid.dims + (3,)
        if vectors.shape != expected:
            raise GridMismatchError(f"vectors shape {vectors.shape} != {expected}")
        if not np.all(np.isfinite(vectors)):
            raise NonFiniteError("displacement field has non-finite components")
        self.vectors = np.ascontiguousarray(vectors)

    @classmethod
    def zeros(cls, grid: Grid) -> "DisplacementField":
        return cls(grid, np.zeros(grid.dims + (3,)))

    @classmethod
    def constant(cls, grid: Grid, vector: Sequence[float]) -> "DisplacementField":
        vectors = np.empty(grid.dims + (3,))
        vectors[...] = np.asarray(vector, dtype=np.float64)
        return cls(grid, vectors)

    def flat(self) -> np.ndarray:
        """(N, 3) vectors in serialization order (x fastest)."""
        return self.vectors.transpose(2, 1, 0, 3).reshape(-1, 3)

    def __add__(self, other: "DisplacementField") -> "DisplacementField":
        if not self.grid.same_as(other.grid):
            raise GridMismatchError("cannot add displacement fields on different grids")
        return DisplacementField(self.grid, self.vectors + other.vectors)


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    # exact at t = 0 and t = 1
    return a * (1.0 - t) + b * t


class TrilinearStencil:
    """Corners and fractions of clamp-to-edge trilinear interpolation at fixed points.

    Sampling, its adjoint (a scatter) and the per-cell spatial derivative all use
    the same corners, so they are exact transposes/derivatives of one another.
    Coordinates are continuous voxel indices of shape (..., 3). Values may carry
    trailing channel axes after the three grid axes; all channels share one gather.
    """

    def __init__(self, dims: Sequence[int], coords: np.ndarray):
        shape = np.asarray(dims, dtype=np.int64)
        points = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        upper = (shape - 1).astype(np.float64)

        self.dims = tuple(int(d) for d in dims)
        self.size = int(np.prod(shape))
        self.num_points = points.shape[0]

        inside = (points >= 0.0) & (points <= upper)
        clamped = np.clip(points, 0.0, upper)
        lo = np.minimum(np.floor(clamped).astype(np.int64), np.maximum(shape - 2, 0))
        hi = np.minimum(lo + 1, shape - 1)
        self._frac = clamped - lo
        # Clamped axes and single-voxel axes have no spatial derivative.
        self._slope = np.where(inside & (shape > 1), 1.0, 0.0)

        strides = np.array([shape[1] * shape[2], shape[2], 1], dtype=np.int64)
        lo_offset = lo * strides
        hi_offset = hi * strides
        self.indices = np.empty((8, self.num_points), dtype=np.int64)
        for c, bits in enumerate(_CORNERS):
            self.indices[c] = sum(
                (hi_offset[:, a] if bits[a] else lo_offset[:, a]) for a in range(3)
            )
        self._weights: Optional[np.ndarray] = None

    @property
    def weights(self) -> np.ndarray:
        """(8, num_points) corner weights, built on first use."""
        if self._weights is None:
            f = self._frac
            g = 1.0 - f
            self._weights = np.stack([
                (f[:, 0] if bx else g[:, 0]) * (f[:, 1] if by else g[:, 1]) * (f[:, 2] if bz else g[:, 2])
                for bx, by, bz in _CORNERS
            ])
        return self._weights

    def _gather(self, values: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
        values = np.asarray(values, dtype=np.float64)
        channels = values.shape[3:] if values.ndim > 3 else ()
        return values.reshape((self.size,) + channels)[self.indices], channels

    def interpolate(self, values: np.ndarray, with_gradient: bool = False):
        """Interpolated values, shape (num_points,) + channels.

        With ``with_gradient`` also returns the derivative w.r.t. continuous index,
        shape (num_points,) + channels + (3,).
        """
        c, channels = self._gather(values)
        frac = self._frac.reshape((self.num_points,) + (1,) * len(channels) + (3,))
        fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
        # corner c = 4 * bx + 2 * by + bz
        c00 = _lerp(c[0], c[4], fx)
        c10 = _lerp(c[2], c[6], fx)
        c01 = _lerp(c[1], c[5], fx)
        c11 = _lerp(c[3], c[7], fx)
        c0 = _lerp(c00, c10, fy)
        c1 = _lerp(c01, c11, fy)
        value = _lerp(c0, c1, fz)
        if not with_gradient:
            return value

        gx = _lerp(_lerp(c[4] - c[0], c[6] - c[2], fy), _lerp(c[5] - c[1], c[7] - c[3], fy), fz)
        gy = _lerp(c10 - c00, c11 - c01, fz)
        gz = c1 - c0
        slope = self._slope.reshape(frac.shape)
        return value, np.stack([gx, gy, gz], axis=-1) * slope

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Interpolated values at the stencil points, shape (num_points,)."""
        return self.interpolate(values)

    def adjoint(self, upstream: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`apply`: scatter point values back onto the grid."""
        upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
        if upstream.size != self.num_points:
            raise GridMismatchError(f"{upstream.size} upstream values for {self.num_points} points")
        scattered = np.bincount(
            self.indices.ravel(),
            weights=(self.weights * upstream[None, :]).ravel(),
            minlength=self.size,
        )
        return scattered.reshape(self.dims)

    def gradient(self, values: np.ndarray) -> np.ndarray:
        """Spatial derivative of the interpolant w.r.t. continuous index, (num_points, 3)."""
        return self.interpolate(values, with_gradient=True)[1]


def _clamp(coords: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    return np.clip(coords, 0.0, np.asarray(dims, dtype=np.float64) - 1.0)


def _map(values: np.ndarray, coords: np.ndarray, order: int) -> np.ndarray:
    flat = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    sampled = ndimage.map_coordinates(values, flat.T, order=order, mode="nearest", prefilter=False)
    return sampled.reshape(coords.shape[:-1])


def _warp_coordinates(grid: Grid, ddf: DisplacementField) -> np.ndarray:
    """Continuous indices into ``grid`` sampled by every voxel of ``ddf``."""
    if grid.same_as(ddf.grid):
        base = grid.index_coordinates()
    else:
        base = grid.world_to_index(ddf.grid.world_coordinates())
    return base + ddf.vectors / np.asarray(grid.spacing)


def sample_points(
    vol: Volume, points: np.ndarray, method: Union[str, ResampleMethod] = ResampleMethod.TRILINEAR
) -> np.ndarray:
    """Sample ``vol`` at world points of shape (..., 3) with clamp-to-edge."""
    method = ResampleMethod(method)
    coords = _clamp(vol.grid.world_to_index(points), vol.grid.dims)
    return _map(vol.values, coords, order=1 if method is ResampleMethod.TRILINEAR else 0)


def trilinear_sample(vol: Volume, point: Sequence[float]) -> float:
    """Trilinear interpolation of ``vol`` at one world point (mm)."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise NonFiniteError(f"cannot sample at non-finite point {p}")
    return float(sample_points(vol, p[None, :])[0])


def warp(vol: Volume, ddf: DisplacementField) -> Volume:
    """Backward warp: ``out(v) = vol(world(v) + ddf(v))`` on the ddf grid."""
    coords = _clamp(_warp_coordinates(vol.grid, ddf), vol.grid.dims)
    values = _map(vol.values, coords, order=1)
    kind = VolumeKind.SOFT_MASK if vol.kind is VolumeKind.BINARY_MASK else vol.kind
    return Volume(ddf.grid, values, kind)


def warp_stencil(grid: Grid, ddf: DisplacementField) -> TrilinearStencil:
    """Interpolation stencil of a warp of any volume on ``grid`` by ``ddf``."""
    return TrilinearStencil(grid.dims, _warp_coordinates(grid, ddf))


def _as_grid_array(values: np.ndarray, grid: Grid, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != grid.size:
        raise GridMismatchError(f"{name} has {arr.size} values, grid has {grid.size} voxels")
    if arr.ndim == 1:
        return arr.reshape(grid.dims, order="F")
    if arr.shape != grid.dims:
        raise GridMismatchError(f"{name} shape {arr.shape} != grid dims {grid.dims}")
    return arr


def warp_grad(
    vol: Volume,
    ddf: DisplacementField,
    upstream: np.ndarray,
    stencil: Optional[TrilinearStencil] = None,
) -> np.ndarray:
    """Reverse-mode gradient of ``sum(upstream * warp(vol, ddf))`` w.r.t. the ddf.

    Returns an array of shape dims + (3,) in loss units per mm.
    """
    up = _as_grid_array(upstream, ddf.grid, "upstream")
    if stencil is None:
        stencil = warp_stencil(vol.grid, ddf)
    grad = stencil.gradient(vol.values) / np.asarray(vol.grid.spacing)
    return (grad * up.reshape(-1)[:, None]).reshape(ddf.grid.dims + (3,))


def resample_to_grid(
    vol: Volume,
    target: Grid,
    method: Union[str, ResampleMethod] = ResampleMethod.TRILINEAR,
    translation: Optional[Sequence[float]] = None,
) -> Volume:
    """Sample ``vol`` at the voxel centers of ``target``.

    With ``translation`` t the output is the volume moved by t, i.e. sampled at
    ``world - t``. Binary masks resampled trilinearly are binarized at 0.5.
    """
    method = ResampleMethod(method)
    if translation is None and target.same_as(vol.grid):
        return Volume(target, vol.values.copy(), vol.kind)

    points = target.world_coordinates()
    if translation is not None:
        points = points - np.asarray(translation, dtype=np.float64)
    values = sample_points(vol, points, method)
    if vol.kind is VolumeKind.BINARY_MASK and method is ResampleMethod.TRILINEAR:
        values = (values >= 0.5).astype(np.float64)
    return Volume(target, values, vol.kind)
