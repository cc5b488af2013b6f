"""Riemannian building blocks for the lifted estimator.

Rotation blocks live on the Stiefel manifold St(d, p) -- p x d matrices with
orthonormal columns -- range bearings on the unit sphere S^{p-1}, and
translations in flat R^p.  Every point validates its defining constraint at
construction time, so a point object in circulation is always feasible and its
array payload is read-only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Feasibility tolerance enforced on construction and after every retraction.
ORTHONORMALITY_TOL = 1e-10
UNIT_NORM_TOL = 1e-10
# Tangency tolerance, scaled by the tangent magnitude.
TANGENCY_TOL = 1e-10
# Below this norm the sphere retraction (metric projection) is undefined.
DEGENERATE_NORM = 1e-12

STIEFEL = "stiefel"
SPHERE = "sphere"
EUCLIDEAN = "euclidean"


def _readonly(values) -> np.ndarray:
    out = np.array(values, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class StiefelPoint:
    """A p x d matrix with orthonormal columns (p >= d)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _readonly(self.matrix)
        if m.ndim != 2:
            raise ValueError(f"expected a 2-d array, got shape {m.shape}")
        p, d = m.shape
        if p < d:
            raise ValueError(f"need at least as many rows as columns, got {p} x {d}")
        residual = m.T @ m - np.eye(d)
        if np.max(np.abs(residual)) > ORTHONORMALITY_TOL:
            raise ValueError(
                f"columns are not orthonormal (residual {np.max(np.abs(residual)):.3e})"
            )
        object.__setattr__(self, "matrix", m)

    @property
    def p(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @property
    def kind(self) -> str:
        return STIEFEL


@dataclass(frozen=True)
class SpherePoint:
    """A unit-norm vector in R^p."""

    vector: np.ndarray

    def __post_init__(self):
        v = _readonly(self.vector)
        if v.ndim != 1:
            raise ValueError(f"expected a 1-d array, got shape {v.shape}")
        if abs(np.linalg.norm(v) - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"vector is not unit norm ({np.linalg.norm(v):.12f})")
        object.__setattr__(self, "vector", v)

    @property
    def p(self) -> int:
        return self.vector.shape[0]

    @property
    def kind(self) -> str:
        return SPHERE


@dataclass(frozen=True)
class EuclideanPoint:
    """An unconstrained vector in R^p."""

    vector: np.ndarray

    def __post_init__(self):
        v = _readonly(self.vector)
        if v.ndim != 1:
            raise ValueError(f"expected a 1-d array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vector has non-finite entries")
        object.__setattr__(self, "vector", v)

    @property
    def p(self) -> int:
        return self.vector.shape[0]

    @property
    def kind(self) -> str:
        return EUCLIDEAN


ManifoldPoint = StiefelPoint | SpherePoint | EuclideanPoint


@dataclass(frozen=True)
class TangentVector:
    """Ambient-space increment tagged with the manifold it is tangent to."""

    data: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in (STIEFEL, SPHERE, EUCLIDEAN):
            raise ValueError(f"unknown manifold kind {self.kind!r}")
        object.__setattr__(self, "data", _readonly(self.data))

    def scaled(self, t: float) -> "TangentVector":
        return TangentVector(t * self.data, self.kind)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def project_to_tangent(point: ManifoldPoint, ambient: np.ndarray) -> TangentVector:
    """Orthogonally project an ambient array onto the tangent space at `point`."""
    ambient = np.asarray(ambient, dtype=float)
    if isinstance(point, StiefelPoint):
        if ambient.shape != point.matrix.shape:
            raise ValueError(f"shape mismatch: {ambient.shape} vs {point.matrix.shape}")
        m = point.matrix
        return TangentVector(ambient - m @ _sym(m.T @ ambient), STIEFEL)
    if isinstance(point, SpherePoint):
        if ambient.shape != point.vector.shape:
            raise ValueError(f"shape mismatch: {ambient.shape} vs {point.vector.shape}")
        u = point.vector
        return TangentVector(ambient - (ambient @ u) * u, SPHERE)
    if isinstance(point, EuclideanPoint):
        if ambient.shape != point.vector.shape:
            raise ValueError(f"shape mismatch: {ambient.shape} vs {point.vector.shape}")
        return TangentVector(ambient, EUCLIDEAN)
    raise TypeError(f"not a manifold point: {type(point).__name__}")


def check_tangent(point: ManifoldPoint, data: np.ndarray) -> None:
    """Raise if `data` is not tangent at `point` (tolerance scales with its norm)."""
    scale = max(1.0, float(np.linalg.norm(data)))
    if isinstance(point, StiefelPoint):
        residual = np.max(np.abs(_sym(point.matrix.T @ data)))
    elif isinstance(point, SpherePoint):
        residual = abs(float(data @ point.vector))
    else:
        residual = 0.0
    if residual > TANGENCY_TOL * scale:
        raise ValueError(f"not a tangent vector (residual {residual:.3e})")


def retract(
    point: ManifoldPoint, tangent: TangentVector | np.ndarray, scale: float = 1.0
) -> ManifoldPoint:
    """Map a tangent step back onto the manifold.

    Stiefel blocks use the QR retraction (sign-corrected so the triangular
    factor has a nonnegative diagonal); spheres use metric projection;
    Euclidean blocks simply add.  A zero step returns `point` unchanged.
    """
    data = tangent.data if isinstance(tangent, TangentVector) else np.asarray(tangent, float)
    if isinstance(point, StiefelPoint):
        expected = point.matrix.shape
    else:
        expected = point.vector.shape
    if data.shape != expected:
        raise ValueError(f"tangent shape {data.shape} does not match point {expected}")
    check_tangent(point, data)
    step = scale * data
    if not np.any(step):
        return point

    if isinstance(point, StiefelPoint):
        q, r = np.linalg.qr(point.matrix + step)
        signs = np.sign(np.diag(r))
        signs[signs == 0.0] = 1.0
        return StiefelPoint(q * signs)
    if isinstance(point, SpherePoint):
        moved = point.vector + step
        norm = float(np.linalg.norm(moved))
        if norm < DEGENERATE_NORM:
            raise ValueError("sphere retraction undefined: step lands at the origin")
        return SpherePoint(moved / norm)
    return EuclideanPoint(point.vector + step)


def random_point(kind: str, d: int, p: int, rng) -> ManifoldPoint:
    """Draw a point whose distribution is invariant under orthogonal maps.

    Stiefel: QR of a Gaussian matrix with sign correction (uniform);
    sphere: normalized Gaussian (uniform); Euclidean: standard normal.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if kind == STIEFEL:
        gauss = rng.standard_normal((p, d))
        q, r = np.linalg.qr(gauss)
        signs = np.sign(np.diag(r))
        signs[signs == 0.0] = 1.0
        return StiefelPoint(q * signs)
    if kind == SPHERE:
        while True:
            gauss = rng.standard_normal(p)
            norm = float(np.linalg.norm(gauss))
            if norm > DEGENERATE_NORM:
                return SpherePoint(gauss / norm)
    if kind == EUCLIDEAN:
        return EuclideanPoint(rng.standard_normal(p))
    raise ValueError(f"unknown manifold kind {kind!r}")


def lift_rank(point: ManifoldPoint) -> ManifoldPoint:
    """Embed a point one rank higher by zero-padding the new dimension."""
    if isinstance(point, StiefelPoint):
        return StiefelPoint(np.vstack([point.matrix, np.zeros((1, point.d))]))
    if isinstance(point, SpherePoint):
        return SpherePoint(np.append(point.vector, 0.0))
    if isinstance(point, EuclideanPoint):
        return EuclideanPoint(np.append(point.vector, 0.0))
    raise TypeError(f"not a manifold point: {type(point).__name__}")


def tangent_dim(point: ManifoldPoint) -> int:
    """Dimension of the tangent space at `point`."""
    if isinstance(point, StiefelPoint):
        p, d = point.p, point.d
        return d * p - d * (d + 1) // 2
    if isinstance(point, SpherePoint):
        return point.p - 1
    return point.p


def tangent_basis(point: ManifoldPoint) -> np.ndarray:
    """Orthonormal tangent basis at `point`, stacked along the first axis.

    Stiefel bases pair the skew directions M (e_a e_b^T - e_b e_a^T)/sqrt(2)
    with the complement directions q_k e_l^T (q_k orthogonal to the columns of
    M); sphere bases complete the point to an orthonormal frame.  Returned
    order is deterministic.
    """
    if isinstance(point, StiefelPoint):
        m = point.matrix
        p, d = m.shape
        basis = np.zeros((tangent_dim(point), p, d))
        idx = 0
        inv_sqrt2 = 1.0 / np.sqrt(2.0)
        for a in range(d):
            for b in range(a + 1, d):
                basis[idx, :, b] = m[:, a] * inv_sqrt2
                basis[idx, :, a] = -m[:, b] * inv_sqrt2
                idx += 1
        if p > d:
            full = np.linalg.qr(m, mode="complete")[0]
            perp = full[:, d:]
            for k in range(p - d):
                for l in range(d):
                    basis[idx, :, l] = perp[:, k]
                    idx += 1
        return basis
    if isinstance(point, SpherePoint):
        u = point.vector.reshape(-1, 1)
        full = np.linalg.qr(u, mode="complete")[0]
        return full[:, 1:].T.copy()
    if isinstance(point, EuclideanPoint):
        return np.eye(point.p)
    raise TypeError(f"not a manifold point: {type(point).__name__}")
