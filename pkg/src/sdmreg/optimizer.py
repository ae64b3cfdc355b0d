"""Coarse-to-fine Adam optimization of a displacement pyramid.

Stage k trains levels 0..k jointly; finer levels stay at zero until their
stage starts. Every level keeps its own Adam moments and step counter. The
lowest-total iterate seen is returned, so the final loss never exceeds the
loss of the identity transform.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .config import RegistrationConfig
from .errors import EmptyMaskError, GridMismatchError, NonFiniteError, NumericalError
from .losses import LossBreakdown, RegistrationObjective
from .metrics import LandmarkSet, MetricsReport, evaluate_registration
from .pyramid import PyramidOperator
from .sdm import signed_distance_map
from .volume import DisplacementField, Volume

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First and second moment buffers of one parameter array."""

    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape))


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    t: int,
    config: RegistrationConfig,
) -> np.ndarray:
    """One bias-corrected Adam update; moments in ``state`` are updated in place."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}"
        )
    if t < 1:
        raise ValueError(f"Adam step index starts at 1, got {t}")

    b1, b2 = config.adam_beta1, config.adam_beta2
    state.m[...] = b1 * state.m + (1.0 - b1) * grads
    state.v[...] = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** t)
    v_hat = state.v / (1.0 - b2 ** t)
    return params - config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


@dataclass
class RegistrationResult:
    ddf: DisplacementField
    loss_trace: List[LossBreakdown]
    iterations_used: List[int]
    metrics: MetricsReport
    initial_loss: LossBreakdown
    final_loss: LossBreakdown
    wall_time_s: float = 0.0
    seed: int = 0
    stage_of_iteration: List[int] = field(default_factory=list)

    @property
    def total_iterations(self) -> int:
        return sum(self.iterations_used)


def _converged(history: List[float], window: int, tol: float) -> bool:
    if len(history) <= window:
        return False
    previous = history[-1 - window]
    change = abs(history[-1] - previous) / max(abs(previous), 1e-12)
    return change < tol


def _check_inputs(moving_mask: Volume, fixed_mask: Volume) -> None:
    if not moving_mask.grid.same_as(fixed_mask.grid):
        raise GridMismatchError("moving and fixed masks must share a grid; run prealignment first")
    for name, mask in (("moving", moving_mask), ("fixed", fixed_mask)):
        if mask.values.sum() <= 0.0:
            raise EmptyMaskError(f"{name} mask is empty")


def register(
    moving_mask: Volume,
    fixed_mask: Volume,
    config: Optional[RegistrationConfig] = None,
    moving_landmarks: Optional[LandmarkSet] = None,
    fixed_landmarks: Optional[LandmarkSet] = None,
) -> RegistrationResult:
    """Optimize a DDF pyramid aligning ``moving_mask`` to ``fixed_mask``."""
    config = config or RegistrationConfig()
    _check_inputs(moving_mask, fixed_mask)
    started = time.perf_counter()

    objective = RegistrationObjective(
        moving_mask,
        fixed_mask,
        signed_distance_map(moving_mask),
        signed_distance_map(fixed_mask),
        config.weights,
        config.sigmas,
        config.bending_cross_terms,
    )
    grid = fixed_mask.grid
    operator = PyramidOperator(grid, config.levels)
    params = operator.zeros()
    states = [AdamState.zeros(p.shape) for p in params]
    steps = [0] * config.levels

    initial = objective.evaluate(DisplacementField.zeros(grid))
    best_total = initial.total
    best_loss = initial
    best_params = [p.copy() for p in params]

    trace: List[LossBreakdown] = []
    stage_of_iteration: List[int] = []
    iterations_used: List[int] = []

    def consider(loss: LossBreakdown, stage: int, iteration: int) -> None:
        nonlocal best_total, best_loss, best_params
        if not np.isfinite(loss.total):
            raise NumericalError(
                f"non-finite loss at stage {stage}, iteration {iteration}",
                stage=stage,
                iteration=iteration,
            )
        if loss.total < best_total:
            best_total = loss.total
            best_loss = loss
            best_params = [p.copy() for p in params]

    for stage in range(config.levels):
        logger.info("Stage %d/%d: grid %s", stage + 1, config.levels, operator.grids[stage].dims)
        history: List[float] = []
        used = 0
        for iteration in range(config.iters_per_level):
            try:
                ddf = DisplacementField(grid, operator.compose(params))
            except NonFiniteError as e:
                raise NumericalError(str(e), stage=stage, iteration=iteration) from e
            loss, grad = objective.evaluate_with_grad(ddf)
            trace.append(loss)
            stage_of_iteration.append(stage)
            used += 1
            consider(loss, stage, iteration)
            if not np.all(np.isfinite(grad)):
                raise NumericalError(
                    f"non-finite gradient at stage {stage}, iteration {iteration}",
                    stage=stage,
                    iteration=iteration,
                )

            history.append(loss.total)
            if _converged(history, config.convergence_window, config.convergence_tol):
                logger.info("Stage %d converged after %d iterations", stage + 1, used)
                break

            level_grads = operator.adjoint(grad)
            for k in range(stage + 1):
                steps[k] += 1
                params[k] = adam_step(params[k], level_grads[k], states[k], steps[k], config)
        iterations_used.append(used)
        logger.debug("Stage %d best total so far %.6g", stage + 1, best_total)

    # The parameters after the last update have not been scored yet.
    final_ddf = DisplacementField(grid, operator.compose(params))
    consider(objective.evaluate(final_ddf), config.levels - 1, config.iters_per_level)

    ddf = DisplacementField(grid, operator.compose(best_params))
    metrics = evaluate_registration(
        moving_mask, fixed_mask, ddf, moving_landmarks, fixed_landmarks
    )
    elapsed = time.perf_counter() - started
    logger.info(
        "Registration finished: total %.6g -> %.6g in %.1fs",
        initial.total, best_loss.total, elapsed,
    )
    return RegistrationResult(
        ddf=ddf,
        loss_trace=trace,
        iterations_used=iterations_used,
        metrics=metrics,
        initial_loss=initial,
        final_loss=best_loss,
        wall_time_s=elapsed,
        seed=config.seed,
        stage_of_iteration=stage_of_iteration,
    )


def coarse_baseline(
    moving_mask: Volume,
    fixed_mask: Volume,
    config: Optional[RegistrationConfig] = None,
    moving_landmarks: Optional[LandmarkSet] = None,
    fixed_landmarks: Optional[LandmarkSet] = None,
) -> RegistrationResult:
    """Result of the identity transform after prealignment, scored like :func:`register`."""
    config = config or RegistrationConfig()
    _check_inputs(moving_mask, fixed_mask)
    started = time.perf_counter()
    objective = RegistrationObjective(
        moving_mask,
        fixed_mask,
        signed_distance_map(moving_mask),
        signed_distance_map(fixed_mask),
        config.weights,
        config.sigmas,
        config.bending_cross_terms,
    )
    ddf = DisplacementField.zeros(fixed_mask.grid)
    loss = objective.evaluate(ddf)
    metrics = evaluate_registration(moving_mask, fixed_mask, ddf, moving_landmarks, fixed_landmarks)
    return RegistrationResult(
        ddf=ddf,
        loss_trace=[loss],
        iterations_used=[0] * config.levels,
        metrics=metrics,
        initial_loss=loss,
        final_loss=loss,
        wall_time_s=time.perf_counter() - started,
        seed=config.seed,
        stage_of_iteration=[0],
    )
