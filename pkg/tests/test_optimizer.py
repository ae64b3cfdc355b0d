"""Tests for the Adam update and the coarse-to-fine registration loop."""

import math

import numpy as np
import pytest

from src.sdmreg.config import RegistrationConfig
from src.sdmreg.errors import EmptyMaskError, GridMismatchError, NumericalError
from src.sdmreg.losses import MODE_PRESETS, LossBreakdown, RegistrationObjective, bending_energy
from src.sdmreg.metrics import dice_binary
from src.sdmreg.optimizer import AdamState, adam_step, coarse_baseline, register
from src.sdmreg.pyramid import PyramidOperator
from src.sdmreg.volume import Grid, Volume, VolumeKind

from .helpers import ball_mask


def _scalar_adam(params, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-Python Adam for a list of floats."""
    m = [0.0] * len(params)
    v = [0.0] * len(params)
    params = list(params)
    for t, grads in enumerate(grads_seq, start=1):
        for i, g in enumerate(grads):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            m_hat = m[i] / (1 - b1 ** t)
            v_hat = v[i] / (1 - b2 ** t)
            params[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)
    return params


class TestAdamStep:
    """Test the bias-corrected Adam update."""

    def test_zero_gradient(self, rng):
        config = RegistrationConfig()
        params = rng.normal(size=(4, 3))
        out = adam_step(params, np.zeros_like(params), AdamState.zeros(params.shape), 1, config)
        np.testing.assert_array_equal(out, params)

    def test_first_step_is_lr_times_sign(self, rng):
        config = RegistrationConfig(lr=0.1)
        params = np.zeros(10)
        grads = rng.normal(size=10)
        out = adam_step(params, grads, AdamState.zeros(10), 1, config)
        np.testing.assert_allclose(out, -0.1 * np.sign(grads), rtol=1e-6)

    def test_matches_scalar_oracle(self, rng):
        config = RegistrationConfig(lr=0.05)
        params = rng.normal(size=6)
        grads = [rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)]
        state = AdamState.zeros(6)
        out = params
        for t, g in enumerate(grads, start=1):
            out = adam_step(out, g, state, t, config)
        expected = _scalar_adam(params.tolist(), [g.tolist() for g in grads], 0.05)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_constant_gradient_two_steps(self):
        config = RegistrationConfig(lr=0.01)
        state = AdamState.zeros(1)
        out = adam_step(np.array([1.0]), np.array([2.0]), state, 1, config)
        out = adam_step(out, np.array([2.0]), state, 2, config)
        assert out[0] == pytest.approx(_scalar_adam([1.0], [[2.0], [2.0]], 0.01)[0], abs=1e-12)

    def test_invalid_inputs(self):
        config = RegistrationConfig()
        with pytest.raises(ValueError):
            adam_step(np.zeros(3), np.zeros(4), AdamState.zeros(3), 1, config)
        with pytest.raises(ValueError):
            adam_step(np.zeros(3), np.zeros(3), AdamState.zeros(3), 0, config)


class TestRegister:
    """Test the registration loop on small synthetic masks."""

    def test_identity_problem_sdm_mode(self, sphere_pair):
        _, fixed = sphere_pair
        config = RegistrationConfig(weights=MODE_PRESETS["sdm"], levels=2, iters_per_level=5)
        result = register(fixed, fixed, config)
        assert result.final_loss.total <= result.initial_loss.total
        assert bending_energy(result.ddf) <= 1e-6
        assert result.metrics.dsc_whole == pytest.approx(1.0, abs=1e-3)

    def test_identity_problem_mix_mode(self, sphere_pair, quick_config):
        _, fixed = sphere_pair
        result = register(fixed, fixed, quick_config)
        assert result.final_loss.total <= result.initial_loss.total

    def test_translation_improves_overlap(self, sphere_pair):
        moving, fixed = sphere_pair
        config = RegistrationConfig(levels=2, iters_per_level=20, convergence_tol=0.0)
        result = register(moving, fixed, config)
        assert result.final_loss.total < result.initial_loss.total
        assert result.metrics.dsc_whole > dice_binary(moving, fixed)

    def test_result_bookkeeping(self, sphere_pair, quick_config):
        moving, fixed = sphere_pair
        result = register(moving, fixed, quick_config)
        assert result.iterations_used == [8, 8]
        assert len(result.loss_trace) == 16
        assert result.stage_of_iteration == [0] * 8 + [1] * 8
        assert result.ddf.grid.same_as(fixed.grid)
        assert result.metrics.tre_mm is None
        assert result.wall_time_s >= 0.0

    def test_convergence_stops_stage_early(self, sphere_pair):
        moving, fixed = sphere_pair
        config = RegistrationConfig(
            levels=2, iters_per_level=10, convergence_tol=10.0, convergence_window=1
        )
        result = register(moving, fixed, config)
        assert result.iterations_used == [2, 2]

    def test_finer_levels_wait_for_their_stage(self, sphere_pair, mocker):
        """Test level k stays exactly zero until stage k starts, then moves."""
        moving, fixed = sphere_pair
        compose = PyramidOperator.compose
        seen = []

        def record(operator, levels):
            seen.append([np.array(level, copy=True) for level in levels])
            return compose(operator, levels)

        mocker.patch.object(PyramidOperator, "compose", autospec=True, side_effect=record)
        config = RegistrationConfig(levels=3, iters_per_level=4, convergence_tol=0.0)
        result = register(moving, fixed, config)

        for levels, stage in zip(seen, result.stage_of_iteration):
            for k in range(stage + 1, config.levels):
                assert not np.any(levels[k]), f"level {k} moved during stage {stage}"
        for stage in range(1, config.levels):
            second_iteration = result.stage_of_iteration.index(stage) + 1
            assert np.any(seen[second_iteration][stage])

    def test_deterministic(self, sphere_pair, quick_config):
        moving, fixed = sphere_pair
        first = register(moving, fixed, quick_config)
        second = register(moving, fixed, quick_config)
        assert [l.total for l in first.loss_trace] == [l.total for l in second.loss_trace]
        assert first.ddf.vectors.tobytes() == second.ddf.vectors.tobytes()

    def test_non_finite_loss_raises(self, sphere_pair, quick_config, mocker):
        moving, fixed = sphere_pair
        nan_loss = LossBreakdown(total=float("nan"), mdsc=0.0, msle=0.0, bending=0.0)
        mocker.patch.object(
            RegistrationObjective,
            "evaluate_with_grad",
            return_value=(nan_loss, np.zeros(fixed.grid.dims + (3,))),
        )
        with pytest.raises(NumericalError) as exc_info:
            register(moving, fixed, quick_config)
        assert exc_info.value.stage == 0
        assert exc_info.value.iteration == 0

    def test_empty_mask(self, sphere_pair, quick_config):
        moving, fixed = sphere_pair
        empty = Volume(fixed.grid, np.zeros(fixed.grid.dims), VolumeKind.BINARY_MASK)
        with pytest.raises(EmptyMaskError):
            register(moving, empty, quick_config)

    def test_grid_mismatch(self, sphere_pair, quick_config):
        moving, _ = sphere_pair
        other = ball_mask(Grid((20, 20, 20)), (10.0, 10.0, 10.0), 4.0)
        with pytest.raises(GridMismatchError):
            register(moving, other, quick_config)

    @pytest.mark.slow
    def test_sphere_translation_recovered(self):
        """Test a radius-10 sphere shifted 3 voxels is recovered."""
        grid = Grid((40, 40, 40))
        center = grid.center
        fixed = ball_mask(grid, center, 10.0)
        moving = ball_mask(grid, center + np.array([3.0, 0.0, 0.0]), 10.0)
        config = RegistrationConfig(levels=4, iters_per_level=100)
        result = register(moving, fixed, config)
        assert result.metrics.dsc_whole > 0.98
        inside = fixed.values > 0.5
        mean_ux = result.ddf.vectors[..., 0][inside].mean()
        assert mean_ux == pytest.approx(3.0, abs=0.5)


class TestCoarseBaseline:
    """Test the identity-transform baseline."""

    def test_zero_field(self, sphere_pair, quick_config):
        moving, fixed = sphere_pair
        result = coarse_baseline(moving, fixed, quick_config)
        assert not np.any(result.ddf.vectors)
        assert result.metrics.dsc_whole == pytest.approx(dice_binary(moving, fixed))
        assert result.metrics.jac_grad == 0.0
        assert result.iterations_used == [0, 0]
