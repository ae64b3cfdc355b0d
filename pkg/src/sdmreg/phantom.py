"""Synthetic mask pairs with a known deformation.

The fixed mask is the analytic ellipsoid sampled at the fixed voxel centers.
The generator draws a smooth field u (affine part plus Gaussian bumps) and
builds the moving mask by pulling the same analytic shape back through the
inverse of x -> x + u(x), solved per voxel by fixed-point iteration. Landmark
balls are placed the same way. ``true_ddf`` is therefore exactly the field a
registration must recover on the fixed grid, and warping the moving mask by it
reproduces the fixed mask up to voxel discretization.
"""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .errors import PhantomGenerationError
from .metrics import LandmarkSet, jacobian_determinant
from .volume import DisplacementField, Grid, Volume, VolumeKind

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 10
AMPLITUDE_DECAY = 0.7
INVERSE_ITERATIONS = 30
PREIMAGE_TOL = 1e-3

Matrix3 = Tuple[Tuple[float, float, float], Tuple[float, float, float], Tuple[float, float, float]]
_IDENTITY: Matrix3 = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and deformation parameters of a phantom; lengths in mm."""

    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    semi_axes: Tuple[float, float, float] = (25.0, 22.0, 20.0)
    affine_matrix: Matrix3 = _IDENTITY
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    affine_jitter: float = 0.0
    bump_count: int = 4
    bump_amplitude: float = 4.0
    bump_sigma: float = 10.0
    landmark_count: int = 3
    landmark_radius: float = 3.0
    seed: int = 0

    def __post_init__(self):
        """Normalize sequences to tuples and validate."""
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "semi_axes", tuple(float(s) for s in self.semi_axes))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        matrix = np.asarray(self.affine_matrix, dtype=np.float64)
        if matrix.shape != (3, 3):
            raise ValueError("affine_matrix must be 3x3")
        object.__setattr__(self, "affine_matrix", tuple(tuple(float(v) for v in row) for row in matrix))

        if len(self.dims) != 3 or any(d < 3 for d in self.dims):
            raise ValueError("dims must be three integers >= 3")
        if any(s <= 0 for s in self.spacing) or any(a <= 0 for a in self.semi_axes):
            raise ValueError("spacing and semi_axes must be positive")
        half_extent = 0.5 * (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        if np.any(np.asarray(self.semi_axes) >= half_extent):
            raise ValueError(f"semi_axes {self.semi_axes} do not fit in the grid")
        if self.bump_count < 0 or self.landmark_count < 0:
            raise ValueError("bump_count and landmark_count must be >= 0")
        if self.bump_amplitude < 0 or self.affine_jitter < 0:
            raise ValueError("bump_amplitude and affine_jitter must be >= 0")
        if self.bump_sigma <= 0 or self.landmark_radius <= 0:
            raise ValueError("bump_sigma and landmark_radius must be positive")

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.spacing)

    def with_seed(self, seed: int) -> "PhantomSpec":
        return replace(self, seed=seed)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = [list(v) if isinstance(v, tuple) else v for v in value]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PhantomSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Unknown phantom spec fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ValueError(f"Invalid phantom spec value: {e}") from e


@dataclass
class PhantomPair:
    fixed_mask: Volume
    moving_mask: Volume
    true_ddf: DisplacementField
    moving_landmarks: LandmarkSet
    fixed_landmarks: LandmarkSet
    spec: PhantomSpec


class SyntheticField:
    """Analytic displacement u(x) = (A - I)(x - c) + t + sum of Gaussian bumps."""

    def __init__(
        self,
        matrix: np.ndarray,
        translation: np.ndarray,
        center: np.ndarray,
        bump_centers: np.ndarray,
        bump_vectors: np.ndarray,
        bump_sigma: float,
    ):
        self.linear = np.asarray(matrix, dtype=np.float64) - np.eye(3)
        self.translation = np.asarray(translation, dtype=np.float64)
        self.center = np.asarray(center, dtype=np.float64)
        self.bump_centers = np.asarray(bump_centers, dtype=np.float64).reshape(-1, 3)
        self.bump_vectors = np.asarray(bump_vectors, dtype=np.float64).reshape(-1, 3)
        self.bump_sigma = bump_sigma

    def scaled_bumps(self, factor: float) -> "SyntheticField":
        return SyntheticField(
            self.linear + np.eye(3),
            self.translation,
            self.center,
            self.bump_centers,
            self.bump_vectors * factor,
            self.bump_sigma,
        )

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        out = (points - self.center) @ self.linear.T + self.translation
        for mu, a in zip(self.bump_centers, self.bump_vectors):
            r2 = np.sum((points - mu) ** 2, axis=-1)
            out = out + np.exp(-0.5 * r2 / self.bump_sigma ** 2)[..., None] * a
        return out

    def preimage(self, points: np.ndarray, iterations: int = INVERSE_ITERATIONS) -> np.ndarray:
        """Solve x + u(x) = y for x by fixed-point iteration."""
        x = np.array(points, dtype=np.float64)
        for _ in range(iterations):
            x = points - self(x)
        return x


def _draw_field(spec: PhantomSpec, rng: np.random.Generator) -> SyntheticField:
    grid = spec.grid
    center = grid.center
    matrix = np.asarray(spec.affine_matrix) + spec.affine_jitter * rng.standard_normal((3, 3))

    axes = np.asarray(spec.semi_axes)
    bump_centers = center + rng.uniform(-1.0, 1.0, size=(spec.bump_count, 3)) * axes
    directions = rng.standard_normal((spec.bump_count, 3))
    directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-12)
    magnitudes = spec.bump_amplitude * rng.uniform(0.5, 1.0, size=(spec.bump_count, 1))
    return SyntheticField(
        matrix, spec.translation, center, bump_centers, directions * magnitudes, spec.bump_sigma
    )


def _draw_landmarks(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Landmark centers well inside the ellipsoid, uniform in its inner 60 %."""
    centers = []
    axes = 0.6 * np.asarray(spec.semi_axes)
    while len(centers) < spec.landmark_count:
        p = rng.uniform(-1.0, 1.0, size=3)
        if np.sum(p * p) <= 1.0:
            centers.append(spec.grid.center + p * axes)
    return np.asarray(centers).reshape(-1, 3)


def _inside_ellipsoid(points: np.ndarray, center: np.ndarray, semi_axes: Sequence[float]) -> np.ndarray:
    return np.sum(((points - center) / np.asarray(semi_axes)) ** 2, axis=-1) <= 1.0


def _as_mask(grid: Grid, inside: np.ndarray) -> Volume:
    return Volume(grid, inside.astype(np.float64), VolumeKind.BINARY_MASK)


def _fold_free_field(spec: PhantomSpec, field: SyntheticField) -> Tuple[SyntheticField, DisplacementField]:
    grid = spec.grid
    points = grid.world_coordinates()
    for attempt in range(MAX_ATTEMPTS):
        candidate = field.scaled_bumps(AMPLITUDE_DECAY ** attempt)
        ddf = DisplacementField(grid, candidate(points))
        min_det = float(jacobian_determinant(ddf).min())
        if min_det > 0.0:
            if attempt:
                logger.info("Phantom field fold-free after %d amplitude reductions", attempt)
            return candidate, ddf
        logger.warning(
            "Phantom field folds (min |J| %.3f), reducing bump amplitude (attempt %d)",
            min_det, attempt + 1,
        )
    raise PhantomGenerationError(
        f"could not generate a fold-free field in {MAX_ATTEMPTS} attempts (seed {spec.seed})"
    )


def generate(spec: PhantomSpec) -> PhantomPair:
    """Seeded phantom pair with its ground-truth displacement field."""
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    field, true_ddf = _fold_free_field(spec, _draw_field(spec, rng))
    landmark_centers = _draw_landmarks(spec, rng)

    points = grid.world_coordinates()
    preimages = field.preimage(points)
    residual = float(np.abs(preimages + field(preimages) - points).max())
    if residual > PREIMAGE_TOL:
        logger.warning("Phantom preimage residual %.3g mm after %d iterations", residual, INVERSE_ITERATIONS)
    fixed_mask = _as_mask(grid, _inside_ellipsoid(points, grid.center, spec.semi_axes))
    moving_mask = _as_mask(grid, _inside_ellipsoid(preimages, grid.center, spec.semi_axes))
    if fixed_mask.values.sum() == 0 or moving_mask.values.sum() == 0:
        raise PhantomGenerationError("phantom ellipsoid is empty on the grid")

    moving_lms: Dict[str, Volume] = {}
    fixed_lms: Dict[str, Volume] = {}
    for i, center in enumerate(landmark_centers):
        lm_id = f"lm{i}"
        moving_lm = _as_mask(grid, np.linalg.norm(preimages - center, axis=-1) <= spec.landmark_radius)
        fixed_lm = _as_mask(grid, np.linalg.norm(points - center, axis=-1) <= spec.landmark_radius)
        if moving_lm.values.sum() == 0 or fixed_lm.values.sum() == 0:
            raise PhantomGenerationError(
                f"landmark {lm_id} vanishes on the grid; increase landmark_radius"
            )
        moving_lms[lm_id] = moving_lm
        fixed_lms[lm_id] = fixed_lm

    logger.debug(
        "Phantom seed %d: |u| max %.3f mm, %d landmarks",
        spec.seed, float(np.linalg.norm(true_ddf.vectors, axis=-1).max()), len(moving_lms),
    )
    return PhantomPair(
        fixed_mask=fixed_mask,
        moving_mask=moving_mask,
        true_ddf=true_ddf,
        moving_landmarks=LandmarkSet(moving_lms),
        fixed_landmarks=LandmarkSet(fixed_lms),
        spec=spec,
    )


def generate_suite(spec: PhantomSpec, count: int) -> List[PhantomPair]:
    """``count`` phantoms with seeds spec.seed, spec.seed + 1, ..."""
    return [generate(spec.with_seed(spec.seed + i)) for i in range(count)]
