"""Tests for grids, volumes, displacement fields and trilinear warping."""

import numpy as np
import pytest

from src.sdmreg.errors import GridMismatchError, NonFiniteError
from src.sdmreg.volume import (
    DisplacementField,
    Grid,
    ResampleMethod,
    TrilinearStencil,
    Volume,
    VolumeKind,
    resample_to_grid,
    trilinear_sample,
    warp,
    warp_grad,
)

from .helpers import ball_mask, com_index


def _linear_volume(grid: Grid) -> Volume:
    x = grid.world_coordinates()
    return Volume(grid, 2.0 * x[..., 0] + 3.0 * x[..., 1] - x[..., 2] + 1.0)


class TestGrid:
    """Test the geometric frame."""

    def test_rejects_bad_dims_and_spacing(self):
        """Test validation of dims and spacing."""
        with pytest.raises(ValueError):
            Grid((0, 4, 4))
        with pytest.raises(ValueError):
            Grid((4, 4, 4), spacing=(1.0, -1.0, 1.0))
        with pytest.raises(ValueError):
            Grid((4, 4))

    def test_centered_on(self):
        """Test a grid built around a world center."""
        grid = Grid.centered_on((10.0, -5.0, 3.0), (96, 96, 80), 0.88)
        np.testing.assert_allclose(grid.center, (10.0, -5.0, 3.0), atol=1e-12)
        np.testing.assert_allclose(grid.extent, (84.48, 84.48, 70.4), atol=1e-9)

    def test_world_index_round_trip(self):
        grid = Grid((5, 6, 7), (0.5, 1.0, 2.75), (1.0, 2.0, -3.0))
        index = np.array([[1.0, 2.5, 3.25]])
        np.testing.assert_allclose(grid.world_to_index(grid.index_to_world(index)), index)

    def test_same_as_tolerates_rounding(self):
        a = Grid((4, 4, 4), (0.88, 0.88, 0.88))
        b = Grid((4, 4, 4), (0.88 + 1e-12, 0.88, 0.88))
        assert a.same_as(b)
        assert not a.same_as(Grid((4, 4, 5), (0.88, 0.88, 0.88)))


class TestVolume:
    """Test scalar volumes."""

    def test_flat_values_are_x_fastest(self):
        """Test that 1D input is read in serialization order."""
        grid = Grid((3, 4, 5))
        vol = Volume(grid, np.arange(grid.size, dtype=float))
        assert vol.values[1, 0, 0] == 1.0
        assert vol.values[0, 1, 0] == 3.0
        assert vol.values[0, 0, 1] == 12.0
        np.testing.assert_array_equal(vol.flat(), np.arange(grid.size))

    def test_binary_mask_validation(self):
        grid = Grid((2, 2, 2))
        with pytest.raises(ValueError):
            Volume(grid, np.full(grid.dims, 0.5), VolumeKind.BINARY_MASK)
        with pytest.raises(ValueError):
            Volume(grid, np.full(grid.dims, 1.5), VolumeKind.SOFT_MASK)

    def test_shape_mismatch(self):
        with pytest.raises(GridMismatchError):
            Volume(Grid((2, 2, 2)), np.zeros((2, 2, 3)))

    def test_binarize_threshold(self):
        grid = Grid((3, 1, 1))
        soft = Volume(grid, np.array([0.2, 0.5, 0.9]), VolumeKind.SOFT_MASK)
        np.testing.assert_array_equal(soft.binarize().values.ravel(), [0.0, 1.0, 1.0])


class TestDisplacementField:
    """Test displacement fields."""

    def test_flat_round_trip(self, rng):
        """Test (N, 3) serialization order."""
        grid = Grid((3, 4, 2))
        flat = rng.normal(size=(grid.size, 3))
        ddf = DisplacementField(grid, flat)
        np.testing.assert_array_equal(ddf.flat(), flat)
        # voxel (1, 0, 0) is the second serialized vector
        np.testing.assert_array_equal(ddf.vectors[1, 0, 0], flat[1])

    def test_rejects_non_finite(self):
        grid = Grid((2, 2, 2))
        vectors = np.zeros(grid.dims + (3,))
        vectors[0, 0, 0, 1] = np.nan
        with pytest.raises(NonFiniteError):
            DisplacementField(grid, vectors)

    def test_addition_requires_same_grid(self):
        a = DisplacementField.zeros(Grid((2, 2, 2)))
        b = DisplacementField.zeros(Grid((3, 2, 2)))
        with pytest.raises(GridMismatchError):
            a + b


class TestTrilinearSampling:
    """Test point sampling and warping."""

    def test_linear_function_reproduced(self):
        """Test that trilinear interpolation is exact on linear functions."""
        grid = Grid((6, 7, 8), (1.0, 0.5, 2.0), (1.0, -1.0, 0.5))
        vol = _linear_volume(grid)
        point = (3.3, 0.7, 6.1)
        expected = 2.0 * 3.3 + 3.0 * 0.7 - 6.1 + 1.0
        assert trilinear_sample(vol, point) == pytest.approx(expected, abs=1e-12)

    def test_clamps_outside_points(self):
        grid = Grid((4, 4, 4))
        vol = _linear_volume(grid)
        assert trilinear_sample(vol, (-10.0, 0.0, 0.0)) == pytest.approx(trilinear_sample(vol, (0.0, 0.0, 0.0)))

    def test_non_finite_point(self):
        with pytest.raises(NonFiniteError):
            trilinear_sample(_linear_volume(Grid((3, 3, 3))), (np.inf, 0.0, 0.0))

    def test_zero_warp_is_identity(self, rng):
        """Test that a zero field reproduces the volume exactly."""
        grid = Grid((7, 5, 6), (0.88, 0.88, 0.88), (3.0, 1.0, -2.0))
        vol = Volume(grid, rng.random(grid.dims))
        np.testing.assert_array_equal(warp(vol, DisplacementField.zeros(grid)).values, vol.values)

    def test_integer_shift(self, rng):
        """Test out(v) = vol(world(v) + ddf(v)) with clamp at the far edge."""
        grid = Grid((6, 4, 4), (2.0, 1.0, 1.0))
        vol = Volume(grid, rng.random(grid.dims))
        warped = warp(vol, DisplacementField.constant(grid, (2.0, 0.0, 0.0)))
        np.testing.assert_allclose(warped.values[:-1], vol.values[1:], atol=1e-12)
        np.testing.assert_allclose(warped.values[-1], vol.values[-1], atol=1e-12)

    def test_binary_mask_warps_to_soft_mask(self, grid12):
        mask = ball_mask(grid12, grid12.center, 3.0)
        warped = warp(mask, DisplacementField.constant(grid12, (0.5, 0.0, 0.0)))
        assert warped.kind is VolumeKind.SOFT_MASK
        assert 0.0 <= warped.values.min() and warped.values.max() <= 1.0


class TestStencil:
    """Test the interpolation stencil used for gradients."""

    def test_adjoint_identity(self, rng):
        """Test <A x, y> == <x, A^T y>."""
        dims = (5, 6, 4)
        coords = rng.uniform(-1.0, 6.0, size=(50, 3))
        stencil = TrilinearStencil(dims, coords)
        x = rng.normal(size=dims)
        y = rng.normal(size=50)
        assert np.dot(stencil.apply(x), y) == pytest.approx(np.sum(x * stencil.adjoint(y)), rel=1e-12)

    def test_matches_map_coordinates(self, rng):
        from scipy import ndimage

        dims = (5, 6, 4)
        coords = rng.uniform(0.0, 2.9, size=(40, 3))
        values = rng.normal(size=dims)
        stencil = TrilinearStencil(dims, coords)
        expected = ndimage.map_coordinates(values, coords.T, order=1)
        np.testing.assert_allclose(stencil.apply(values), expected, atol=1e-12)

    def test_warp_grad_matches_finite_differences(self, rng):
        """Test the reverse-mode warp gradient away from cell boundaries."""
        grid = Grid((6, 5, 7), (1.0, 2.0, 0.5))
        vol = Volume(grid, rng.normal(size=grid.dims))
        spacing = np.asarray(grid.spacing)
        vectors = (0.3 + rng.uniform(-0.1, 0.1, size=grid.dims + (3,))) * spacing
        ddf = DisplacementField(grid, vectors)
        upstream = rng.normal(size=grid.dims)
        grad = warp_grad(vol, ddf, upstream)

        h = 1e-5
        for _ in range(20):
            v = tuple(rng.integers(0, d) for d in grid.dims)
            c = int(rng.integers(0, 3))
            plus, minus = vectors.copy(), vectors.copy()
            plus[v + (c,)] += h
            minus[v + (c,)] -= h
            f_plus = np.sum(upstream * warp(vol, DisplacementField(grid, plus)).values)
            f_minus = np.sum(upstream * warp(vol, DisplacementField(grid, minus)).values)
            assert grad[v + (c,)] == pytest.approx((f_plus - f_minus) / (2 * h), rel=1e-6, abs=1e-8)


class TestResample:
    """Test resampling onto another grid."""

    def test_same_grid_copy(self, grid12):
        mask = ball_mask(grid12, grid12.center, 3.0)
        out = resample_to_grid(mask, grid12)
        np.testing.assert_array_equal(out.values, mask.values)
        assert out.values is not mask.values

    def test_translation_moves_mask(self, grid24):
        """Test that a translation t moves the center of mass by t."""
        mask = ball_mask(grid24, grid24.center, 4.0)
        moved = resample_to_grid(mask, grid24, ResampleMethod.TRILINEAR, translation=(3.0, -2.0, 0.0))
        assert moved.kind is VolumeKind.BINARY_MASK
        np.testing.assert_allclose(com_index(moved) - com_index(mask), (3.0, -2.0, 0.0), atol=1e-9)

    def test_nearest_keeps_labels(self, grid12):
        mask = ball_mask(grid12, grid12.center, 3.0)
        target = Grid.centered_on(grid12.center, (9, 9, 9), 1.3)
        out = resample_to_grid(mask, target, "nearest")
        assert set(np.unique(out.values)) <= {0.0, 1.0}


class TestStencilChannels:
    """Test stacked-channel interpolation used by the objective."""

    def test_channels_match_single_volumes(self, rng):
        dims = (6, 5, 7)
        coords = rng.uniform(-0.5, 6.5, size=(4, 3, 5, 3))
        a = rng.normal(size=dims)
        b = rng.normal(size=dims)
        stencil = TrilinearStencil(dims, coords)
        values, grads = stencil.interpolate(np.stack([a, b], axis=-1), with_gradient=True)
        assert values.shape == (60, 2)
        assert grads.shape == (60, 2, 3)
        np.testing.assert_allclose(values[:, 0], stencil.apply(a), atol=1e-12)
        np.testing.assert_allclose(values[:, 1], stencil.apply(b), atol=1e-12)
        np.testing.assert_allclose(grads[:, 1], stencil.gradient(b), atol=1e-12)

    def test_weights_reproduce_apply(self, rng):
        """Test that the scatter weights describe the same interpolant."""
        dims = (4, 6, 5)
        coords = rng.uniform(-1.0, 7.0, size=(30, 3))
        values = rng.normal(size=dims)
        stencil = TrilinearStencil(dims, coords)
        by_weights = np.sum(values.ravel()[stencil.indices] * stencil.weights, axis=0)
        np.testing.assert_allclose(stencil.apply(values), by_weights, atol=1e-12)
        np.testing.assert_allclose(stencil.weights.sum(axis=0), 1.0, atol=1e-12)

    def test_grid_points_are_exact(self, rng):
        """Test that integer indices, including the last voxel, return stored values."""
        dims = (5, 4, 3)
        values = rng.normal(size=dims)
        stencil = TrilinearStencil(dims, Grid(dims).index_coordinates())
        np.testing.assert_array_equal(stencil.apply(values), values.ravel())

    def test_gradient_of_linear_function(self):
        grid = Grid((6, 7, 8))
        values = _linear_volume(grid).values
        coords = np.array([[1.2, 3.7, 4.4], [4.9, 0.1, 6.5]])
        np.testing.assert_allclose(
            TrilinearStencil(grid.dims, coords).gradient(values), [[2.0, 3.0, -1.0]] * 2, atol=1e-12
        )


class TestLinearity:
    """Test that sampling and warp gradients are linear in the volume values."""

    def test_trilinear_sample_is_linear_in_values(self, rng):
        grid = Grid((6, 5, 7), (0.88, 1.0, 1.5), (2.0, -1.0, 0.0))
        a = Volume(grid, rng.normal(size=grid.dims))
        b = Volume(grid, rng.normal(size=grid.dims))
        combined = Volume(grid, 2.5 * a.values - 0.75 * b.values)
        for _ in range(25):
            point = grid.index_to_world(rng.uniform(-1.0, 7.0, size=3))
            expected = 2.5 * trilinear_sample(a, point) - 0.75 * trilinear_sample(b, point)
            assert trilinear_sample(combined, point) == pytest.approx(expected, abs=1e-12)

    def test_warp_grad_of_constant_volume_is_zero(self, rng):
        grid = Grid((7, 6, 5), (1.0, 0.5, 2.0))
        vol = Volume(grid, np.full(grid.dims, 3.7))
        ddf = DisplacementField(grid, rng.normal(scale=2.0, size=grid.dims + (3,)))
        upstream = rng.normal(size=grid.dims)
        assert not np.any(warp_grad(vol, ddf, upstream))
