"""Post-hoc global-optimality certification of stationary points.

A feasible stationary point Y of the lifted problem is a global minimizer of
the underlying semidefinite relaxation exactly when the certificate matrix
S = Q + blockdiag(multipliers) is positive semidefinite.  The multipliers
solve per-variable least-squares problems whose closed forms are evaluated
here; the PSD test runs through a minimum-eigenpair computation with a
value-scaled tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np
import scipy.sparse as sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .graph import LiftedAssignment, ROTATION, UNIT_BEARING, VariableKey
from .objective import ObjectiveMatrix, objective_value

#: Largest matrix side for which the dense symmetric eigensolver is the default.
DENSE_EIGEN_MAX_DIM = 2000

#: Certification additionally requires ||S Y|| <= this factor times max(1, f).
STATIONARITY_GATE = 1e-4


class CertificateError(ValueError):
    """Multiplier blocks that do not conform to the objective's block layout."""


class EigensolverError(RuntimeError):
    """Iterative eigensolver failed to produce any usable estimate."""


@dataclass(frozen=True)
class ToleranceRule:
    """Value-scaled eigenvalue tolerance: eta = min(max_, max(rel*f, min_))."""

    eta_min: float = 1e-3
    eta_max: float = 1e-1
    relative: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.eta_min <= self.eta_max:
            raise ValueError("tolerance bounds must be positive and ordered")
        if self.relative < 0.0:
            raise ValueError("relative factor must be nonnegative")

    def eta(self, value: float) -> float:
        return min(self.eta_max, max(self.relative * abs(value), self.eta_min))


@dataclass(frozen=True)
class Multipliers:
    """Per-variable multiplier blocks: symmetric d x d matrices for rotations,
    scalars for unit bearings; translations carry none."""

    rotation: Mapping[VariableKey, np.ndarray]
    bearing: Mapping[VariableKey, float]


@dataclass(frozen=True)
class Certificate:
    """Outcome of the optimality test at a candidate solution."""

    multipliers: Multipliers
    matrix: sparse.csr_matrix
    value: float
    min_eigenvalue: float
    eigenvector: np.ndarray
    eigen_residual: float
    eta: float
    certified: bool
    stationarity_residual: float


def compute_multipliers(
    objective: ObjectiveMatrix, assignment: LiftedAssignment
) -> Multipliers:
    """Closed-form least-squares multipliers at a feasible point.

    Rotation block (aggregate rows Y_n, Y_n Y_n^T = I): -Sym((QY)_n Y_n^T);
    bearing row y_n: -(QY)_n . y_n.  Each minimizes its variable's summand of
    ||S Y||^2 independently — the least-squares problem is block-separable.
    """
    index_map = objective.index_map
    aggregate = assignment.aggregate(index_map)
    product = objective.matrix @ aggregate
    rotation: dict[VariableKey, np.ndarray] = {}
    bearing: dict[VariableKey, float] = {}
    for entry in index_map.entries:
        block = slice(entry.offset, entry.offset + entry.rows)
        if entry.kind == ROTATION:
            cross = product[block] @ aggregate[block].T
            rotation[entry.key] = -0.5 * (cross + cross.T)
        elif entry.kind == UNIT_BEARING:
            bearing[entry.key] = -float(product[entry.offset] @ aggregate[entry.offset])
    return Multipliers(MappingProxyType(rotation), MappingProxyType(bearing))


def assemble_certificate(
    objective: ObjectiveMatrix, multipliers: Multipliers
) -> sparse.csr_matrix:
    """S = Q plus the block-diagonal adjoint of the multipliers."""
    index_map = objective.index_map
    rows: list[int] = []
    cols: list[int] = []
    data: list[float] = []
    for key, block in multipliers.rotation.items():
        entry = index_map.entry(key)
        if entry.kind != ROTATION:
            raise CertificateError(f"{key} is not a rotation variable")
        block = np.asarray(block, dtype=float)
        if block.shape != (entry.rows, entry.rows):
            raise CertificateError(
                f"multiplier block for {key} has shape {block.shape}, "
                f"expected {(entry.rows, entry.rows)}"
            )
        for a in range(entry.rows):
            for b in range(entry.rows):
                rows.append(entry.offset + a)
                cols.append(entry.offset + b)
                data.append(block[a, b])
    for key, scalar in multipliers.bearing.items():
        entry = index_map.entry(key)
        if entry.kind != UNIT_BEARING:
            raise CertificateError(f"{key} is not a bearing variable")
        rows.append(entry.offset)
        cols.append(entry.offset)
        data.append(float(scalar))
    adjoint = sparse.coo_matrix(
        (data, (rows, cols)), shape=objective.matrix.shape
    )
    return (objective.matrix + adjoint).tocsr()


def _sign_fixed_unit(vector: np.ndarray) -> np.ndarray:
    vector = vector / np.linalg.norm(vector)
    return -vector if vector[int(np.argmax(np.abs(vector)))] < 0.0 else vector


def min_eigenpair(
    matrix: sparse.spmatrix, tol: float = 1e-6, method: str = "auto"
) -> tuple[float, np.ndarray]:
    """Minimum eigenvalue and unit eigenvector of a symmetric sparse matrix.

    Dense symmetric eigendecomposition up to ``DENSE_EIGEN_MAX_DIM``;
    beyond that, Lanczos iteration on the spectrally shifted operator
    sigma*I - S (sigma a Gershgorin upper bound on the spectrum), whose top
    eigenvalue maps back to the minimum of S.  The eigenvector's sign is
    fixed so its largest-magnitude entry is positive.
    """
    matrix = matrix.tocsr()
    n = matrix.shape[0]
    if matrix.shape[1] != n:
        raise ValueError("matrix must be square")
    if method not in ("auto", "dense", "lanczos"):
        raise ValueError(f"unknown eigensolver method {method!r}")
    if method == "auto":
        method = "dense" if n <= DENSE_EIGEN_MAX_DIM else "lanczos"
    if method == "lanczos" and n < 5:
        method = "dense"

    if method == "dense":
        values, vectors = np.linalg.eigh(matrix.toarray())
        return float(values[0]), _sign_fixed_unit(vectors[:, 0])

    diagonal = matrix.diagonal()
    absolute_row_sums = np.asarray(np.abs(matrix).sum(axis=1)).ravel()
    sigma = float(np.max(diagonal + (absolute_row_sums - np.abs(diagonal))))
    shifted = (sigma * sparse.identity(n, format="csr") - matrix).tocsr()
    v0 = np.full(n, 1.0 / np.sqrt(n))
    try:
        values, vectors = eigsh(shifted, k=1, which="LA", tol=tol, v0=v0)
    except ArpackNoConvergence:
        try:
            values, vectors = eigsh(
                shifted,
                k=1,
                which="LA",
                tol=tol,
                v0=v0,
                ncv=min(n, 60),
                maxiter=50 * n,
            )
        except ArpackNoConvergence as exc:
            if len(exc.eigenvalues) and exc.eigenvectors.size:
                values, vectors = exc.eigenvalues, exc.eigenvectors
            else:
                raise EigensolverError(
                    "Lanczos iteration produced no eigenpair estimate"
                ) from exc
    return float(sigma - values[0]), _sign_fixed_unit(vectors[:, 0])


def certify(
    min_eigenvalue: float, value: float, rule: ToleranceRule = ToleranceRule()
) -> tuple[bool, float]:
    """PSD verdict for a computed minimum eigenvalue at objective value f."""
    eta = rule.eta(value)
    return min_eigenvalue > -eta, eta


def suboptimality_bound(feasible_value: float, relaxation_value: float) -> float:
    """Gap between a feasible point's value and the certified relaxation value.

    The gap upper-bounds how far the feasible point can be from the true
    constrained optimum.  A certified relaxation value above the feasible
    value beyond numerical slack indicates an inconsistency and raises.
    """
    gap = feasible_value - relaxation_value
    if gap < -1e-8 * max(1.0, abs(feasible_value)):
        raise ValueError(
            f"relaxation value {relaxation_value} exceeds feasible value "
            f"{feasible_value}"
        )
    return gap


def certify_solution(
    objective: ObjectiveMatrix,
    assignment: LiftedAssignment,
    rule: ToleranceRule = ToleranceRule(),
    *,
    eigen_tolerance: float = 1e-6,
    eigen_method: str = "auto",
) -> Certificate:
    """Full certification pipeline at a candidate stationary point.

    Certified requires all three of: the minimum eigenvalue clears the
    value-scaled tolerance, the eigen residual meets the solver tolerance,
    and the stationarity residual ||S Y|| is under the gate — a non-stationary
    point can pass the eigenvalue test without being a solution.
    """
    multipliers = compute_multipliers(objective, assignment)
    matrix = assemble_certificate(objective, multipliers)
    aggregate = assignment.aggregate(objective.index_map)
    value = objective_value(objective, assignment)
    stationarity_residual = float(np.linalg.norm(matrix @ aggregate))
    min_eigenvalue, eigenvector = min_eigenpair(matrix, eigen_tolerance, eigen_method)
    eigen_residual = float(
        np.linalg.norm(matrix @ eigenvector - min_eigenvalue * eigenvector)
    )
    scale = float(np.max(np.abs(matrix).sum(axis=1))) if matrix.nnz else 0.0
    psd_ok, eta = certify(min_eigenvalue, value, rule)
    residual_ok = eigen_residual <= eigen_tolerance * max(1.0, scale)
    stationary_ok = stationarity_residual <= STATIONARITY_GATE * max(1.0, abs(value))
    return Certificate(
        multipliers=multipliers,
        matrix=matrix,
        value=value,
        min_eigenvalue=min_eigenvalue,
        eigenvector=eigenvector,
        eigen_residual=eigen_residual,
        eta=eta,
        certified=bool(psd_ok and residual_ok and stationary_ok),
        stationarity_residual=stationarity_residual,
    )
