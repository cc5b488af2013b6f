"""Quadratic objective assembly and evaluation for lifted factor graphs.

Every factor loss is an exact quadratic form <Q, Y Y^T> in the aggregate
block-row matrix Y (rotations contribute d rows each, translations and
bearings one row each), so the whole objective is a single sparse symmetric
positive-semidefinite matrix that does not depend on the lift rank p.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sparse

from .graph import (
    FactorGraph,
    LiftedAssignment,
    LiftedGraph,
    RangeFactor,
    RelativeRotationFactor,
    RelativeTranslationFactor,
    ROTATION,
    TRANSLATION,
    UNIT_BEARING,
    VariableKey,
)
from .manifolds import EuclideanPoint, SpherePoint, StiefelPoint, tangent_basis, tangent_dim


@dataclass(frozen=True)
class BlockEntry:
    key: VariableKey
    kind: str
    offset: int
    rows: int


@dataclass(frozen=True)
class BlockIndexMap:
    """Row layout of the aggregate matrix: declaration order, contiguous blocks."""

    entries: tuple[BlockEntry, ...]
    total_rows: int

    def __post_init__(self):
        object.__setattr__(self, "_by_key", {e.key: e for e in self.entries})

    @classmethod
    def from_graph(cls, graph: FactorGraph | LiftedGraph) -> "BlockIndexMap":
        base = graph.base if isinstance(graph, LiftedGraph) else graph
        entries = []
        offset = 0
        for dc in base.decls:
            rows = base.d if dc.kind == ROTATION else 1
            entries.append(BlockEntry(dc.key, dc.kind, offset, rows))
            offset += rows
        return cls(tuple(entries), offset)

    def entry(self, key: VariableKey) -> BlockEntry:
        return self._by_key[key]

    def slice_of(self, key: VariableKey) -> slice:
        e = self._by_key[key]
        return slice(e.offset, e.offset + e.rows)


@dataclass(frozen=True)
class ObjectiveMatrix:
    """Sparse symmetric PSD matrix Q with its row layout."""

    matrix: sparse.csr_matrix
    index_map: BlockIndexMap

    @property
    def total_rows(self) -> int:
        return self.index_map.total_rows


class _TripletBuffer:
    def __init__(self):
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []

    def add_block(self, row_offset: int, col_offset: int, block: np.ndarray) -> None:
        block = np.atleast_2d(block)
        nr, nc = block.shape
        self.rows.append(np.repeat(np.arange(row_offset, row_offset + nr), nc))
        self.cols.append(np.tile(np.arange(col_offset, col_offset + nc), nr))
        self.vals.append(block.ravel())

    def add_scalar(self, row: int, col: int, value: float) -> None:
        self.add_block(row, col, np.array([[value]]))

    def build(self, n: int) -> sparse.csr_matrix:
        if not self.rows:
            return sparse.csr_matrix((n, n))
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def assemble_objective(graph: FactorGraph | LiftedGraph) -> ObjectiveMatrix:
    """Accumulate every factor's quadratic form into one sparse matrix."""
    base = graph.base if isinstance(graph, LiftedGraph) else graph
    imap = BlockIndexMap.from_graph(base)
    d = base.d
    buf = _TripletBuffer()
    eye = np.eye(d)

    for factor in base.factors:
        if isinstance(factor, RelativeRotationFactor):
            kappa = factor.concentration
            oi = imap.entry(factor.rotation_i).offset
            oj = imap.entry(factor.rotation_j).offset
            buf.add_block(oi, oi, kappa * eye)
            buf.add_block(oj, oj, kappa * eye)
            buf.add_block(oi, oj, -kappa * factor.measurement)
            buf.add_block(oj, oi, -kappa * factor.measurement.T)
        elif isinstance(factor, RelativeTranslationFactor):
            tau = factor.precision
            orot = imap.entry(factor.rotation_i).offset
            oti = imap.entry(factor.translation_i).offset
            otj = imap.entry(factor.translation_j).offset
            meas = factor.measurement
            buf.add_scalar(oti, oti, tau)
            buf.add_scalar(otj, otj, tau)
            buf.add_scalar(oti, otj, -tau)
            buf.add_scalar(otj, oti, -tau)
            buf.add_block(orot, orot, tau * np.outer(meas, meas))
            col = (tau * meas).reshape(-1, 1)
            buf.add_block(orot, otj, -col)
            buf.add_block(otj, orot, -col.T)
            buf.add_block(orot, oti, col)
            buf.add_block(oti, orot, col.T)
        elif isinstance(factor, RangeFactor):
            w = factor.weight
            rng_ = factor.measured_range
            oti = imap.entry(factor.translation_i).offset
            otj = imap.entry(factor.translation_j).offset
            ob = imap.entry(factor.bearing).offset
            buf.add_scalar(oti, oti, w)
            buf.add_scalar(otj, otj, w)
            buf.add_scalar(oti, otj, -w)
            buf.add_scalar(otj, oti, -w)
            buf.add_scalar(ob, ob, w * rng_ * rng_)
            buf.add_scalar(otj, ob, -w * rng_)
            buf.add_scalar(ob, otj, -w * rng_)
            buf.add_scalar(oti, ob, w * rng_)
            buf.add_scalar(ob, oti, w * rng_)
        else:  # pragma: no cover - build_graph rejects unknown factors
            raise TypeError(f"unknown factor type {type(factor).__name__}")

    return ObjectiveMatrix(buf.build(imap.total_rows), imap)


def objective_value(objective: ObjectiveMatrix, assignment: LiftedAssignment) -> float:
    """<Q, Y Y^T> evaluated as sum((Q @ Y) * Y)."""
    y = assignment.aggregate(objective.index_map)
    return float(np.sum((objective.matrix @ y) * y))


def objective_product(objective: ObjectiveMatrix, aggregate: np.ndarray) -> np.ndarray:
    """Sparse product Q @ Y for an aggregate matrix Y."""
    return objective.matrix @ aggregate


def factor_losses(
    graph: FactorGraph | LiftedGraph, assignment: LiftedAssignment
) -> np.ndarray:
    """Per-factor losses evaluated directly from the measurement formulas.

    Independent of the assembled matrix; the two routes agree to rounding.
    """
    base = graph.base if isinstance(graph, LiftedGraph) else graph
    losses = np.zeros(len(base.factors))
    for k, factor in enumerate(base.factors):
        if isinstance(factor, RelativeRotationFactor):
            mi = assignment[factor.rotation_i].matrix
            mj = assignment[factor.rotation_j].matrix
            diff = mj - mi @ factor.measurement
            losses[k] = factor.concentration * float(np.sum(diff * diff))
        elif isinstance(factor, RelativeTranslationFactor):
            anchor = assignment[factor.rotation_i].matrix
            ti = assignment[factor.translation_i].vector
            tj = assignment[factor.translation_j].vector
            diff = tj - ti - anchor @ factor.measurement
            losses[k] = factor.precision * float(diff @ diff)
        else:
            ti = assignment[factor.translation_i].vector
            tj = assignment[factor.translation_j].vector
            b = assignment[factor.bearing].vector
            diff = tj - ti - factor.measured_range * b
            losses[k] = factor.weight * float(diff @ diff)
    return losses


def riemannian_gradient(
    objective: ObjectiveMatrix, assignment: LiftedAssignment
) -> dict[VariableKey, np.ndarray]:
    """Tangent projection of the ambient gradient 2 Q Y, per variable.

    Rotation gradients come back in stored form (p x d); translations and
    bearings as length-p vectors.
    """
    y = assignment.aggregate(objective.index_map)
    ambient = 2.0 * (objective.matrix @ y)
    out: dict[VariableKey, np.ndarray] = {}
    for entry in objective.index_map.entries:
        block = ambient[entry.offset : entry.offset + entry.rows]
        point = assignment[entry.key]
        if isinstance(point, StiefelPoint):
            g = block.T
            m = point.matrix
            sym = 0.5 * (m.T @ g + g.T @ m)
            out[entry.key] = g - m @ sym
        elif isinstance(point, SpherePoint):
            g = block[0]
            u = point.vector
            out[entry.key] = g - (g @ u) * u
        else:
            out[entry.key] = block[0].copy()
    return out


def export_symmetric_triplets(objective: ObjectiveMatrix, path) -> None:
    """Write Q in symmetric coordinate (Matrix Market) text form."""
    scipy.io.mmwrite(path, objective.matrix, symmetry="symmetric")


class JacobianWorkspace:
    """Reusable residual/Jacobian assembler for one lifted graph.

    The sparsity pattern of the Jacobian is fixed by the graph and rank, so
    row/column indices (and the constant +/-weight*I blocks of translation
    variables) are computed once; per-evaluation work only fills the
    orientation-dependent blocks.
    """

    def __init__(self, lifted: LiftedGraph):
        self.graph = lifted
        self.p = lifted.p
        self.d = lifted.d
        self.index_map = BlockIndexMap.from_graph(lifted)

        p, d = self.p, self.d
        dim_rotation = d * p - d * (d + 1) // 2
        dims = {ROTATION: dim_rotation, TRANSLATION: p, UNIT_BEARING: p - 1}
        self.tangent_offsets: dict[VariableKey, int] = {}
        self.tangent_dims: dict[VariableKey, int] = {}
        offset = 0
        for entry in self.index_map.entries:
            self.tangent_offsets[entry.key] = offset
            self.tangent_dims[entry.key] = dims[entry.kind]
            offset += dims[entry.kind]
        self.total_cols = offset

        rows_per_factor = []
        for factor in lifted.factors:
            rows_per_factor.append(p * d if isinstance(factor, RelativeRotationFactor) else p)
        self.residual_offsets = np.concatenate([[0], np.cumsum(rows_per_factor)])
        self.total_residuals = int(self.residual_offsets[-1])

        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        # (factor index, key, data slice) for blocks that depend on the point.
        self._dynamic: list[tuple[int, VariableKey, slice, str]] = []
        static_chunks: dict[int, np.ndarray] = {}
        pos = 0

        def register(fk: int, key: VariableKey, n_rows: int, role: str, static=None):
            nonlocal pos
            nc = self.tangent_dims[key]
            r0 = int(self.residual_offsets[fk])
            c0 = self.tangent_offsets[key]
            rows.append(np.repeat(np.arange(r0, r0 + n_rows), nc))
            cols.append(np.tile(np.arange(c0, c0 + nc), n_rows))
            sl = slice(pos, pos + n_rows * nc)
            pos += n_rows * nc
            if static is not None:
                static_chunks[sl.start] = static.ravel()
            else:
                self._dynamic.append((fk, key, sl, role))

        eye_p = np.eye(p)
        for fk, factor in enumerate(lifted.factors):
            if isinstance(factor, RelativeRotationFactor):
                register(fk, factor.rotation_i, p * d, "rotation_from")
                register(fk, factor.rotation_j, p * d, "rotation_to")
            elif isinstance(factor, RelativeTranslationFactor):
                srt = np.sqrt(factor.precision)
                register(fk, factor.rotation_i, p, "translation_anchor")
                register(fk, factor.translation_i, p, "", static=-srt * eye_p)
                register(fk, factor.translation_j, p, "", static=srt * eye_p)
            else:
                w0 = 1.0 / factor.stddev
                register(fk, factor.translation_i, p, "", static=-w0 * eye_p)
                register(fk, factor.translation_j, p, "", static=w0 * eye_p)
                register(fk, factor.bearing, p, "range_bearing")

        self._rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        self._cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        self._data_template = np.zeros(pos)
        for start, chunk in static_chunks.items():
            self._data_template[start : start + chunk.size] = chunk

    def residuals(self, assignment: LiftedAssignment) -> np.ndarray:
        """Weighted residual vector alone.

        The squared norm equals the objective value but is evaluated without
        the cancellation the quadratic form suffers, so it resolves value
        differences down to machine precision of the value itself — the
        optimizer's step-acceptance test relies on this.
        """
        graph = self.graph
        residuals = np.zeros(self.total_residuals)
        for fk, factor in enumerate(graph.factors):
            sl = slice(int(self.residual_offsets[fk]), int(self.residual_offsets[fk + 1]))
            if isinstance(factor, RelativeRotationFactor):
                srk = np.sqrt(factor.concentration)
                mi = assignment[factor.rotation_i].matrix
                mj = assignment[factor.rotation_j].matrix
                residuals[sl] = (srk * (mj - mi @ factor.measurement)).ravel()
            elif isinstance(factor, RelativeTranslationFactor):
                srt = np.sqrt(factor.precision)
                anchor = assignment[factor.rotation_i].matrix
                ti = assignment[factor.translation_i].vector
                tj = assignment[factor.translation_j].vector
                residuals[sl] = srt * (tj - ti - anchor @ factor.measurement)
            else:
                w0 = 1.0 / factor.stddev
                ti = assignment[factor.translation_i].vector
                tj = assignment[factor.translation_j].vector
                b = assignment[factor.bearing].vector
                residuals[sl] = w0 * (tj - ti - factor.measured_range * b)
        return residuals

    def compute(self, assignment: LiftedAssignment):
        """Weighted residual vector, sparse Jacobian, and the tangent bases used.

        Jacobian columns are directional derivatives of the residuals along
        each variable's orthonormal tangent basis, so J^T r is half the
        Riemannian gradient in basis coordinates.
        """
        graph = self.graph
        residuals = self.residuals(assignment)
        data = self._data_template.copy()
        bases: dict[VariableKey, np.ndarray] = {}

        def basis_for(key: VariableKey) -> np.ndarray:
            cached = bases.get(key)
            if cached is None:
                cached = tangent_basis(assignment[key])
                bases[key] = cached
            return cached

        for fk, key, dsl, role in self._dynamic:
            factor = graph.factors[fk]
            basis = basis_for(key)
            if role == "rotation_from":
                srk = np.sqrt(factor.concentration)
                derived = np.einsum("qpd,de->qpe", basis, factor.measurement)
                block = -srk * derived.reshape(basis.shape[0], -1).T
            elif role == "rotation_to":
                srk = np.sqrt(factor.concentration)
                block = srk * basis.reshape(basis.shape[0], -1).T
            elif role == "translation_anchor":
                srt = np.sqrt(factor.precision)
                derived = basis @ factor.measurement
                block = -srt * derived.T
            else:  # range_bearing
                w0 = 1.0 / factor.stddev
                block = -(w0 * factor.measured_range) * basis.T
            data[dsl] = block.ravel()

        jacobian = sparse.csr_matrix(
            (data, (self._rows, self._cols)),
            shape=(self.total_residuals, self.total_cols),
        )
        for entry in self.index_map.entries:
            basis_for(entry.key)
        return residuals, jacobian, bases


def residuals_and_jacobian(lifted: LiftedGraph, assignment: LiftedAssignment):
    """One-shot residual vector and sparse Jacobian (see JacobianWorkspace)."""
    assignment.validate_for(lifted)
    residuals, jacobian, _ = JacobianWorkspace(lifted).compute(assignment)
    return residuals, jacobian
