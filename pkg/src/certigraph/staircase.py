"""Rank-incrementing solve loop with certification, rounding, refinement.

Each level optimizes the rank-p lifted problem locally, then runs the
optimality test.  A certified level ends the climb; a failed test with
negative curvature yields an exact descent direction out of the saddle into
rank p+1, built from the minimum eigenvector of the certificate matrix.  The
certified low-rank factor is rounded to the original search space (and, for
range-aided problems, refined by one more rank-d local optimization).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .certifier import (
    Certificate,
    ToleranceRule,
    certify_solution,
)
from .graph import (
    FactorGraph,
    LiftedAssignment,
    LiftedGraph,
    ROTATION,
    UNIT_BEARING,
    lift_graph,
    odometry_initialization,
)
from .manifolds import EuclideanPoint, SpherePoint, StiefelPoint, retract
from .objective import (
    JacobianWorkspace,
    ObjectiveMatrix,
    assemble_objective,
    objective_value,
)
from .optimizer import OptimizerConfig, local_optimize

#: The polish pass re-optimizes down to this relative gradient floor when a
#: level passes the eigenvalue test but misses the stationarity gate.
POLISH_GRADIENT_FLOOR = 1e-4

#: Singular values of the aggregate below this (relative to the largest) make
#: the rank-d truncation degenerate.
DEGENERATE_SPECTRUM = 1e-12


class EscapeError(RuntimeError):
    """No feasible descent step found along the negative-curvature direction."""


class RoundingError(RuntimeError):
    """The aggregate cannot be truncated to a feasible rank-d solution."""


@dataclass(frozen=True)
class StaircaseConfig:
    """Solve settings; `p0`/`p_max` default to d and min(p0 + 8, r).

    `refine` None means refine exactly when the graph has range factors.
    """

    p0: int | None = None
    p_max: int | None = None
    optimizer: OptimizerConfig = OptimizerConfig()
    tolerance: ToleranceRule = ToleranceRule()
    eigen_tolerance: float = 1e-6
    eigen_method: str = "auto"
    escape_initial_step: float = 1.0
    escape_shrink: float = 0.5
    escape_max_halvings: int = 32
    escape_decrease_fraction: float = 1e-4
    refine: bool | None = None

    def __post_init__(self):
        if self.p0 is not None and self.p0 < 1:
            raise ValueError("initial rank must be positive")
        if self.p0 is not None and self.p_max is not None and self.p_max < self.p0:
            raise ValueError("rank cap below initial rank")
        if not self.escape_initial_step > 0.0:
            raise ValueError("escape step must be positive")
        if not 0.0 < self.escape_shrink < 1.0:
            raise ValueError("escape shrink must lie in (0, 1)")
        if self.escape_max_halvings < 0:
            raise ValueError("halving count must be nonnegative")
        if not self.escape_decrease_fraction > 0.0:
            raise ValueError("decrease fraction must be positive")


@dataclass(frozen=True)
class LevelRecord:
    """One rank level of the climb."""

    rank: int
    value: float
    gradient_norm: float
    iterations: int
    termination: str
    min_eigenvalue: float
    eta: float
    certified: bool
    optimize_time_s: float
    certify_time_s: float
    escape_time_s: float


@dataclass(frozen=True)
class SolveReport:
    """Machine-readable outcome of a staircase run."""

    levels: Sequence[LevelRecord]
    status: str  # success | stalled-uncertified | rank-cap-exceeded
    sdp_value: float
    rounded_value: float | None
    refined_value: float | None
    term_rank: int
    certified: bool
    opt_time_s: float
    total_time_s: float
    rounding_error: str | None


@dataclass(frozen=True)
class RoundedSolution:
    """Rank-d solution: rotation blocks in SO(d), unit bearings."""

    assignment: LiftedAssignment
    value: float


@dataclass(frozen=True)
class StaircaseResult:
    """Report plus the final iterate, its certificate, and rounded outputs."""

    report: SolveReport
    assignment: LiftedAssignment
    certificate: Certificate
    rounded: RoundedSolution | None
    refined: RoundedSolution | None


def saddle_escape(
    lifted: LiftedGraph,
    objective: ObjectiveMatrix,
    assignment: LiftedAssignment,
    eigenvector: np.ndarray,
    min_eigenvalue: float,
    *,
    initial_step: float = 1.0,
    shrink: float = 0.5,
    max_halvings: int = 32,
    decrease_fraction: float = 1e-4,
    reference_value: float | None = None,
) -> tuple[LiftedAssignment, float]:
    """Descend out of a rank-p saddle into rank p+1.

    Zero-pads the assignment one rank higher (objective value unchanged),
    forms the tangent direction whose new-column entries are the certificate
    matrix's minimum eigenvector, and backtracks over a step grid until
    f(candidate) <= f - decrease_fraction * step^2 * |min eigenvalue|.
    """
    if min_eigenvalue >= 0.0:
        raise EscapeError(
            f"no negative curvature to follow (eigenvalue {min_eigenvalue:.3e})"
        )
    padded = assignment.lift()
    if padded.p != lifted.p:
        raise ValueError(
            f"lift target rank {lifted.p} does not follow assignment rank {assignment.p}"
        )
    eigenvector = np.asarray(eigenvector, dtype=float)
    norm = float(np.linalg.norm(eigenvector))
    if not norm > 0.0:
        raise EscapeError("degenerate eigenvector")
    eigenvector = eigenvector / norm

    index_map = objective.index_map
    directions = {}
    for entry in index_map.entries:
        segment = eigenvector[entry.offset : entry.offset + entry.rows]
        if entry.kind == ROTATION:
            block = np.zeros((padded.p, entry.rows))
            block[-1, :] = segment
        else:
            block = np.zeros(padded.p)
            block[-1] = segment[0]
        directions[entry.key] = block

    workspace = JacobianWorkspace(lifted)
    if reference_value is None:
        residuals = workspace.residuals(padded)
        reference_value = float(residuals @ residuals)

    step = initial_step
    for _ in range(max_halvings + 1):
        candidate = padded.with_updates(
            {
                key: retract(padded[key], block, scale=step)
                for key, block in directions.items()
            }
        )
        trial = workspace.residuals(candidate)
        value = float(trial @ trial)
        if value <= reference_value - decrease_fraction * step**2 * abs(min_eigenvalue):
            return candidate, value
        step *= shrink
    raise EscapeError(
        f"no decrease after {max_halvings} halvings from step {initial_step} "
        f"(value {reference_value:.6e}, eigenvalue {min_eigenvalue:.3e})"
    )


def round_solution(
    objective: ObjectiveMatrix, assignment: LiftedAssignment, d: int
) -> RoundedSolution:
    """Truncate a rank-p aggregate to a feasible rank-d solution.

    Rank-d SVD truncation, then per-block repair: rotation blocks project to
    the nearest orthogonal matrix; if most determinants are negative the
    whole aggregate is reflected in its last column first (an exact symmetry
    of the relaxation); leftover negative blocks flip to the nearest SO(d)
    matrix individually; bearings renormalize; translations read directly.
    """
    index_map = objective.index_map
    aggregate = assignment.aggregate(index_map)
    left, spectrum, _ = np.linalg.svd(aggregate, full_matrices=False)
    if spectrum.size < d or spectrum[d - 1] <= DEGENERATE_SPECTRUM * max(
        spectrum[0], 1.0
    ):
        raise RoundingError(
            f"aggregate spectrum degenerate at rank {d}: "
            f"{np.array2string(spectrum[:d], precision=3)}"
        )
    truncated = left[:, :d] * spectrum[:d]

    def orthogonal_parts(block):
        u, _, vt = np.linalg.svd(block)
        return u, vt

    blocks = {}
    determinant_signs = []
    for entry in index_map.entries:
        if entry.kind != ROTATION:
            continue
        u, vt = orthogonal_parts(
            truncated[entry.offset : entry.offset + entry.rows]
        )
        blocks[entry.key] = (u, vt)
        determinant_signs.append(np.sign(np.linalg.det(u @ vt)))
    if determinant_signs and sum(determinant_signs) < 0:
        reflector = np.eye(d)
        reflector[-1, -1] = -1.0
        truncated = truncated @ reflector
        blocks = {}
        for entry in index_map.entries:
            if entry.kind == ROTATION:
                blocks[entry.key] = orthogonal_parts(
                    truncated[entry.offset : entry.offset + entry.rows]
                )

    points = {}
    for entry in index_map.entries:
        row_block = truncated[entry.offset : entry.offset + entry.rows]
        if entry.kind == ROTATION:
            u, vt = blocks[entry.key]
            projected = u @ vt
            if np.linalg.det(projected) < 0.0:
                flip = np.eye(d)
                flip[-1, -1] = -1.0
                projected = u @ flip @ vt
            points[entry.key] = StiefelPoint(projected.T)
        elif entry.kind == UNIT_BEARING:
            vector = row_block[0]
            norm = float(np.linalg.norm(vector))
            if norm <= DEGENERATE_SPECTRUM:
                raise RoundingError(f"bearing {entry.key} truncates to zero")
            points[entry.key] = SpherePoint(vector / norm)
        else:
            points[entry.key] = EuclideanPoint(row_block[0].copy())
    rounded = LiftedAssignment(points, d)
    return RoundedSolution(rounded, objective_value(objective, rounded))


def refine_solution(
    lifted: LiftedGraph,
    objective: ObjectiveMatrix,
    rounded: RoundedSolution,
    config: OptimizerConfig = OptimizerConfig(),
) -> RoundedSolution:
    """One more rank-d local optimization from the rounded point."""
    result = local_optimize(lifted, objective, rounded.assignment, config)
    return RoundedSolution(result.assignment, result.value)


def run_staircase(
    graph: FactorGraph,
    config: StaircaseConfig = StaircaseConfig(),
    initial: LiftedAssignment | None = None,
) -> StaircaseResult:
    """Solve the relaxation to certified optimality by climbing ranks.

    Per level: local optimization, certification, and — when the certificate
    matrix has curvature below the tolerance — a saddle escape into the next
    rank.  A level that passes the eigenvalue test but misses the
    stationarity gate gets one polish re-optimization targeting the gate.
    Ends with status "success" (certified), "stalled-uncertified" (no
    certificate and no escape), or "rank-cap-exceeded"; rounding (and
    refinement when configured or when range factors are present) always runs
    on the final iterate when possible.
    """
    started = time.perf_counter()
    d = graph.d
    p0 = config.p0 if config.p0 is not None else d
    if p0 < d:
        raise ValueError(f"initial rank {p0} below ambient dimension {d}")

    objective = assemble_objective(lift_graph(graph, p0))
    total_rows = objective.index_map.total_rows
    p_max = config.p_max if config.p_max is not None else min(p0 + 8, total_rows)
    if not p0 <= p_max <= total_rows:
        raise ValueError(
            f"rank bounds {p0}..{p_max} invalid for aggregate size {total_rows}"
        )

    if initial is None:
        current = odometry_initialization(graph, p0)
    else:
        if initial.p != p0:
            raise ValueError(f"initial assignment rank {initial.p}, expected {p0}")
        current = initial

    levels: list[LevelRecord] = []
    status = None
    p = p0
    while True:
        lifted = lift_graph(graph, p)
        tick = time.perf_counter()
        result = local_optimize(lifted, objective, current, config.optimizer)
        optimize_time = time.perf_counter() - tick

        tick = time.perf_counter()
        certificate = certify_solution(
            objective,
            result.assignment,
            config.tolerance,
            eigen_tolerance=config.eigen_tolerance,
            eigen_method=config.eigen_method,
        )
        certify_time = time.perf_counter() - tick

        if (
            not certificate.certified
            and certificate.min_eigenvalue > -certificate.eta
        ):
            # Eigenvalue test passed; only stationarity (or the eigen
            # residual) failed.  One polish pass aims the gradient at the
            # gate, which bounds ||S Y|| at half the gradient norm.
            polish = replace(
                config.optimizer,
                gradient_floor=POLISH_GRADIENT_FLOOR,
                relative_decrease=1e-15,
                absolute_decrease=1e-15,
            )
            tick = time.perf_counter()
            polished = local_optimize(lifted, objective, result.assignment, polish)
            optimize_time += time.perf_counter() - tick
            tick = time.perf_counter()
            recheck = certify_solution(
                objective,
                polished.assignment,
                config.tolerance,
                eigen_tolerance=config.eigen_tolerance,
                eigen_method=config.eigen_method,
            )
            certify_time += time.perf_counter() - tick
            if recheck.certified or polished.value <= result.value:
                result, certificate = polished, recheck

        escape_time = 0.0
        escaped = None
        if certificate.certified:
            status = "success"
        elif certificate.min_eigenvalue > -certificate.eta:
            status = "stalled-uncertified"
        elif p + 1 > p_max:
            status = "rank-cap-exceeded"
        else:
            tick = time.perf_counter()
            try:
                escaped, _ = saddle_escape(
                    lift_graph(graph, p + 1),
                    objective,
                    result.assignment,
                    certificate.eigenvector,
                    certificate.min_eigenvalue,
                    initial_step=config.escape_initial_step,
                    shrink=config.escape_shrink,
                    max_halvings=config.escape_max_halvings,
                    decrease_fraction=config.escape_decrease_fraction,
                    reference_value=result.value,
                )
            except EscapeError:
                status = "stalled-uncertified"
            escape_time = time.perf_counter() - tick

        levels.append(
            LevelRecord(
                rank=p,
                value=result.value,
                gradient_norm=result.gradient_norm,
                iterations=result.iterations,
                termination=result.termination,
                min_eigenvalue=certificate.min_eigenvalue,
                eta=certificate.eta,
                certified=certificate.certified,
                optimize_time_s=optimize_time,
                certify_time_s=certify_time,
                escape_time_s=escape_time,
            )
        )
        if status is not None:
            break
        current = escaped
        p += 1

    rounded = None
    refined = None
    rounding_error = None
    try:
        rounded = round_solution(objective, result.assignment, d)
    except RoundingError as error:
        rounding_error = str(error)
    should_refine = (
        config.refine if config.refine is not None else graph.has_range_factors()
    )
    if rounded is not None and should_refine:
        refined = refine_solution(
            lift_graph(graph, d), objective, rounded, config.optimizer
        )

    total_time = time.perf_counter() - started
    report = SolveReport(
        levels=tuple(levels),
        status=status,
        sdp_value=result.value,
        rounded_value=None if rounded is None else rounded.value,
        refined_value=None if refined is None else refined.value,
        term_rank=p,
        certified=certificate.certified,
        opt_time_s=sum(level.optimize_time_s for level in levels),
        total_time_s=total_time,
        rounding_error=rounding_error,
    )
    return StaircaseResult(report, result.assignment, certificate, rounded, refined)
