"""Tests for center-of-mass coarse alignment."""

import numpy as np
import pytest

from src.sdmreg.errors import EmptyMaskError, GridMismatchError
from src.sdmreg.phantom import PhantomSpec, generate_suite
from src.sdmreg.prealign import center_of_mass, coarse_align, target_grid
from src.sdmreg.volume import Grid, Volume, VolumeKind

from .helpers import ball_mask, box_mask


class TestCenterOfMass:
    """Test world-space centers of mass."""

    def test_single_voxel(self):
        grid = Grid((6, 6, 6))
        mask = box_mask(grid, (2, 3, 4), (2, 3, 4))
        np.testing.assert_allclose(center_of_mass(mask), (2.0, 3.0, 4.0))

    def test_two_voxels(self):
        grid = Grid((6, 3, 3))
        values = np.zeros(grid.dims)
        values[0, 1, 1] = values[4, 1, 1] = 1.0
        com = center_of_mass(Volume(grid, values, VolumeKind.BINARY_MASK))
        assert com[0] == pytest.approx(2.0)

    def test_symmetric_mask(self):
        mask = ball_mask(Grid((24, 24, 24), (0.5, 0.5, 2.0), (3.0, 1.0, -4.0)), (8.75, 6.75, 19.0), 3.0)
        np.testing.assert_allclose(center_of_mass(mask), mask.grid.center, atol=1e-12)

    def test_errors(self, grid12):
        with pytest.raises(EmptyMaskError):
            center_of_mass(Volume(grid12, np.zeros(grid12.dims), VolumeKind.BINARY_MASK))
        with pytest.raises(ValueError):
            center_of_mass(Volume(grid12, np.ones(grid12.dims)))


class TestCoarseAlign:
    """Test translation onto the target grid."""

    def test_default_target_grid(self):
        target = target_grid(Grid((200, 200, 40), (0.5, 0.5, 2.75)))
        assert target.dims == (96, 96, 80)
        np.testing.assert_allclose(target.extent, (84.48, 84.48, 70.4), atol=1e-9)

    def test_already_centered(self, grid24):
        mask = ball_mask(grid24, grid24.center, 5.0)
        result = coarse_align(None, mask, None, mask, target_dims=(24, 24, 24), target_spacing=1.0)
        np.testing.assert_allclose(result.translation, 0.0, atol=1e-12)
        np.testing.assert_array_equal(result.moving_mask_out.values, mask.values)
        assert result.moving_out is None and result.fixed_out is None

    def test_known_offset(self):
        grid = Grid((48, 32, 32))
        fixed = ball_mask(grid, grid.center, 5.0)
        moving = ball_mask(grid, grid.center + np.array([10.0, 0.0, 0.0]), 5.0)
        result = coarse_align(None, moving, None, fixed, target_dims=(32, 32, 32), target_spacing=1.0)
        np.testing.assert_allclose(result.translation, (-10.0, 0.0, 0.0), atol=0.5)
        moved_com = center_of_mass(result.moving_mask_out)
        assert np.linalg.norm(moved_com - result.grid.center) < 1.0

    def test_images_follow_masks(self, grid24, rng):
        mask = ball_mask(grid24, grid24.center + np.array([2.0, 0.0, 0.0]), 4.0)
        image = Volume(grid24, rng.random(grid24.dims))
        result = coarse_align(image, mask, image, mask, target_dims=(16, 16, 16), target_spacing=1.0)
        assert result.moving_out.grid.same_as(result.grid)
        assert result.fixed_out.grid.same_as(result.grid)

    def test_second_alignment_is_near_identity(self):
        """Test that aligning an aligned pair again moves it by less than one voxel."""
        grid = Grid((40, 36, 32), (0.88, 0.88, 0.88))
        fixed = ball_mask(grid, grid.center, 6.0)
        moving = ball_mask(grid, grid.center + np.array([4.0, -3.0, 2.0]), 5.0)
        first = coarse_align(None, moving, None, fixed, target_dims=(28, 28, 24), target_spacing=1.1)
        second = coarse_align(
            None, first.moving_mask_out, None, first.fixed_mask_out,
            target_dims=(28, 28, 24), target_spacing=1.1,
        )
        assert second.grid.same_as(first.grid)
        assert np.linalg.norm(second.translation) < 1.1

    def test_image_grid_mismatch(self, grid12, grid24):
        mask = ball_mask(grid24, grid24.center, 4.0)
        with pytest.raises(GridMismatchError):
            coarse_align(Volume(grid12, np.zeros(grid12.dims)), mask, None, mask)

    def test_phantoms_land_on_center(self):
        spec = PhantomSpec(
            dims=(32, 32, 32), semi_axes=(8.0, 7.0, 6.0), bump_sigma=5.0,
            bump_amplitude=2.0, translation=(2.5, -1.5, 1.0),
        )
        for pair in generate_suite(spec, 4):
            result = coarse_align(
                None, pair.moving_mask, None, pair.fixed_mask,
                target_dims=(24, 24, 24), target_spacing=1.0,
            )
            distance = np.linalg.norm(center_of_mass(result.moving_mask_out) - result.grid.center)
            assert distance < np.sqrt(3.0)
