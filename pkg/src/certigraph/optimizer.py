"""Riemannian Levenberg-Marquardt over lifted assignments.

Gauss-Newton steps on the weighted residuals, damped by a scalar added to the
normal equations; steps retract each variable along its orthonormal tangent
basis.  The graph's global-symmetry rank deficiency is handled by the damping
alone -- no anchoring of any variable.

Objective values are tracked as the squared residual norm rather than the
quadratic form in the objective matrix: the two agree to 1e-10 relative, but
the residual route is free of cancellation, so the step-acceptance test can
resolve decreases down to machine precision of the value itself.  The matrix
route is still evaluated once on exit as a consistency guard.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as splinalg

from .graph import LiftedAssignment, LiftedGraph
from .manifolds import retract
from .objective import JacobianWorkspace, ObjectiveMatrix, objective_value


class OptimizationError(RuntimeError):
    """Non-finite objective, or disagreement between the two value routes."""


@dataclass(frozen=True)
class OptimizerConfig:
    """Damped Gauss-Newton settings.

    Termination: gradient norm under `gradient_floor * max(1, f)`, or the
    decrease between consecutive accepted values under the absolute or
    relative threshold, or the iteration cap, or damping growing past its
    ceiling without an acceptable step.
    """

    max_iterations: int = 100
    relative_decrease: float = 1e-5
    absolute_decrease: float = 1e-4
    gradient_floor: float = 1e-8
    initial_damping_scale: float = 1e-6
    damping_growth: float = 10.0
    damping_shrink: float = 0.1
    min_damping: float = 1e-12
    max_damping: float = 1e12
    linear_solver: str = "auto"  # auto | direct | cg
    cg_size_threshold: int = 100_000
    cg_tolerance: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        for name in ("relative_decrease", "absolute_decrease", "gradient_floor"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.damping_shrink < 1.0 < self.damping_growth:
            raise ValueError("damping factors must bracket 1")
        if not 0.0 < self.min_damping <= self.max_damping:
            raise ValueError("damping bounds must be positive and ordered")
        if self.linear_solver not in ("auto", "direct", "cg"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")


@dataclass(frozen=True)
class StationaryPoint:
    """Result of a local optimization run."""

    assignment: LiftedAssignment
    value: float
    gradient_norm: float
    iterations: int
    termination: str
    damping: float


def _apply_step(
    workspace: JacobianWorkspace,
    assignment: LiftedAssignment,
    bases,
    step: np.ndarray,
) -> LiftedAssignment:
    updates = {}
    for key, basis in bases.items():
        offset = workspace.tangent_offsets[key]
        coords = step[offset : offset + workspace.tangent_dims[key]]
        tangent = np.tensordot(coords, basis, axes=(0, 0))
        updates[key] = retract(assignment[key], tangent)
    return assignment.with_updates(updates)


def _solve_damped(
    normal: sparse.csc_matrix,
    rhs: np.ndarray,
    damping: float,
    identity: sparse.csc_matrix,
    config: OptimizerConfig,
) -> np.ndarray | None:
    """Solve (J^T J + damping I) delta = rhs; None signals a failed solve."""
    system = normal + damping * identity
    use_cg = config.linear_solver == "cg" or (
        config.linear_solver == "auto" and rhs.size > config.cg_size_threshold
    )
    if use_cg:
        diagonal = system.diagonal()
        preconditioner = splinalg.LinearOperator(
            system.shape, matvec=lambda v: v / diagonal
        )
        solution, info = splinalg.cg(
            system, rhs, rtol=config.cg_tolerance, atol=0.0, M=preconditioner
        )
        return solution if info == 0 else None
    try:
        return splinalg.splu(system).solve(rhs)
    except RuntimeError:
        return None


def local_optimize(
    lifted: LiftedGraph,
    objective: ObjectiveMatrix,
    initial: LiftedAssignment,
    config: OptimizerConfig = OptimizerConfig(),
    callback: Callable | None = None,
) -> StationaryPoint:
    """Minimize the lifted objective over the feasible set from `initial`.

    Accepted iterations strictly decrease the objective; rejected trials only
    raise the damping.  Returns the best point seen with the termination
    reason.  `callback(iteration, value, gradient_norm, assignment)` fires
    once per outer iteration before stepping.
    """
    initial.validate_for(lifted)
    workspace = JacobianWorkspace(lifted)
    identity = sparse.identity(workspace.total_cols, format="csc")

    current = initial
    initial_residuals = workspace.residuals(current)
    value = float(initial_residuals @ initial_residuals)
    if not np.isfinite(value):
        raise OptimizationError("non-finite objective at the initial point")
    damping = None
    accepted = 0

    def finish(termination: str, gradient_norm: float) -> StationaryPoint:
        matrix_value = objective_value(objective, current)
        if abs(matrix_value - value) > 1e-6 * max(1.0, abs(value)):
            raise OptimizationError(
                f"residual-route value {value!r} disagrees with "
                f"matrix-route value {matrix_value!r}"
            )
        return StationaryPoint(
            current, value, gradient_norm, accepted, termination, damping or 0.0
        )

    for _ in range(config.max_iterations):
        residuals, jacobian, bases = workspace.compute(current)
        gradient = 2.0 * (jacobian.T @ residuals)
        gradient_norm = float(np.linalg.norm(gradient))
        if callback is not None:
            callback(accepted, value, gradient_norm, current)
        if gradient_norm <= config.gradient_floor * max(1.0, abs(value)):
            return finish("gradient_floor", gradient_norm)

        normal = (jacobian.T @ jacobian).tocsc()
        if damping is None:
            mean_diag = float(normal.diagonal().mean())
            damping = config.initial_damping_scale * mean_diag
            if not damping > 0.0:
                damping = config.min_damping
        rhs = -(jacobian.T @ residuals)

        while True:
            step = _solve_damped(normal, rhs, damping, identity, config)
            if step is not None:
                candidate = _apply_step(workspace, current, bases, step)
                trial = workspace.residuals(candidate)
                candidate_value = float(trial @ trial)
                if np.isfinite(candidate_value) and candidate_value < value:
                    previous_value = value
                    current, value = candidate, candidate_value
                    damping = max(damping * config.damping_shrink, config.min_damping)
                    accepted += 1
                    break
            damping *= config.damping_growth
            if damping > config.max_damping:
                return finish("damping_limit", gradient_norm)

        decrease = previous_value - value
        if decrease < config.absolute_decrease:
            return finish("absolute_decrease", gradient_norm)
        if decrease < config.relative_decrease * max(abs(previous_value), 1e-300):
            return finish("relative_decrease", gradient_norm)

    residuals, jacobian, _ = workspace.compute(current)
    gradient_norm = float(np.linalg.norm(2.0 * (jacobian.T @ residuals)))
    return finish("max_iterations", gradient_norm)
