"""Variables, factors, and assignments for lifted factor-graph estimation.

A factor graph couples rotation, translation, and unit-bearing variables
through three measurement factors:

* relative rotation between two poses, weighted by a concentration kappa:
  kappa * ||R_j - R_i @ Rbar||_F^2
* relative translation expressed in the observing frame, weighted by a
  precision tau:  tau * ||t_j - t_i - R_i @ tbar||^2
* range between two translations, rewritten as a quadratic through an
  auxiliary unit bearing b:  (1/sigma^2) * ||t_j - t_i - rbar * b||^2

Lifting re-domains the same variables at a chosen rank p (rotations on
St(d, p), bearings on S^{p-1}, translations in R^p) without touching the
measurements, so one graph serves every rank.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .manifolds import (
    EUCLIDEAN,
    SPHERE,
    STIEFEL,
    DEGENERATE_NORM,
    EuclideanPoint,
    ManifoldPoint,
    SpherePoint,
    StiefelPoint,
    lift_rank,
    random_point,
)

MEASUREMENT_TOL = 1e-9

POSE_ROTATION = "pose_rotation"
POSE_TRANSLATION = "pose_translation"
LANDMARK = "landmark"
BEARING = "bearing"

ROTATION = "rotation"
TRANSLATION = "translation"
UNIT_BEARING = "unit_bearing"

_ROLE_KIND = {
    POSE_ROTATION: ROTATION,
    POSE_TRANSLATION: TRANSLATION,
    LANDMARK: TRANSLATION,
    BEARING: UNIT_BEARING,
}


@dataclass(frozen=True, order=True)
class VariableKey:
    """Identity of one variable: a symbol class plus an integer index."""

    role: str
    index: int

    def __post_init__(self):
        if self.role not in _ROLE_KIND:
            raise ValueError(f"unknown variable role {self.role!r}")
        if self.index < 0:
            raise ValueError(f"negative variable index {self.index}")

    def __str__(self) -> str:
        return f"{self.role}[{self.index}]"


def pose_rotation(index: int) -> VariableKey:
    return VariableKey(POSE_ROTATION, index)


def pose_translation(index: int) -> VariableKey:
    return VariableKey(POSE_TRANSLATION, index)


def landmark(index: int) -> VariableKey:
    return VariableKey(LANDMARK, index)


def bearing(index: int) -> VariableKey:
    return VariableKey(BEARING, index)


@dataclass(frozen=True)
class VariableDecl:
    """Declares a variable and the kind of manifold block it occupies."""

    key: VariableKey
    kind: str

    def __post_init__(self):
        if self.kind not in (ROTATION, TRANSLATION, UNIT_BEARING):
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if _ROLE_KIND[self.key.role] != self.kind:
            raise ValueError(f"role {self.key.role!r} cannot declare kind {self.kind!r}")


def _readonly(values, shape=None) -> np.ndarray:
    out = np.array(values, dtype=float)
    if shape is not None and out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RelativeRotationFactor:
    """kappa * ||R_j - R_i @ measurement||_F^2 between two pose rotations."""

    rotation_i: VariableKey
    rotation_j: VariableKey
    measurement: np.ndarray
    concentration: float

    def __post_init__(self):
        for key in (self.rotation_i, self.rotation_j):
            if key.role != POSE_ROTATION:
                raise ValueError(f"{key} is not a pose rotation")
        if self.rotation_i == self.rotation_j:
            raise ValueError(f"self-loop rotation factor on {self.rotation_i}")
        m = _readonly(self.measurement)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"rotation measurement must be square, got {m.shape}")
        d = m.shape[0]
        if np.max(np.abs(m.T @ m - np.eye(d))) > MEASUREMENT_TOL:
            raise ValueError("rotation measurement is not orthogonal")
        if abs(np.linalg.det(m) - 1.0) > MEASUREMENT_TOL:
            raise ValueError("rotation measurement has determinant != +1")
        if not self.concentration > 0.0:
            raise ValueError("concentration must be positive")
        object.__setattr__(self, "measurement", m)

    @property
    def keys(self) -> tuple[VariableKey, ...]:
        return (self.rotation_i, self.rotation_j)


@dataclass(frozen=True)
class RelativeTranslationFactor:
    """tau * ||t_j - t_i - R_i @ measurement||^2, anchored at rotation_i."""

    rotation_i: VariableKey
    translation_i: VariableKey
    translation_j: VariableKey
    measurement: np.ndarray
    precision: float

    def __post_init__(self):
        if self.rotation_i.role != POSE_ROTATION:
            raise ValueError(f"{self.rotation_i} is not a pose rotation")
        for key in (self.translation_i, self.translation_j):
            if _ROLE_KIND[key.role] != TRANSLATION:
                raise ValueError(f"{key} is not a translation variable")
        if self.translation_i == self.translation_j:
            raise ValueError(f"self-loop translation factor on {self.translation_i}")
        m = _readonly(self.measurement)
        if m.ndim != 1:
            raise ValueError(f"translation measurement must be a vector, got {m.shape}")
        if not self.precision > 0.0:
            raise ValueError("precision must be positive")
        object.__setattr__(self, "measurement", m)

    @property
    def keys(self) -> tuple[VariableKey, ...]:
        return (self.rotation_i, self.translation_i, self.translation_j)


@dataclass(frozen=True)
class RangeFactor:
    """(1/stddev^2) * ||t_j - t_i - measured_range * b||^2 with unit bearing b.

    The bearing key is assigned by `build_graph` (leave it None when
    constructing factors by hand).
    """

    translation_i: VariableKey
    translation_j: VariableKey
    measured_range: float
    stddev: float
    bearing: VariableKey | None = None

    def __post_init__(self):
        for key in (self.translation_i, self.translation_j):
            if _ROLE_KIND[key.role] != TRANSLATION:
                raise ValueError(f"{key} is not a translation variable")
        if self.translation_i == self.translation_j:
            raise ValueError(f"self-loop range factor on {self.translation_i}")
        if not self.measured_range > 0.0:
            raise ValueError("measured range must be positive")
        if not self.stddev > 0.0:
            raise ValueError("range stddev must be positive")
        if self.bearing is not None and self.bearing.role != BEARING:
            raise ValueError(f"{self.bearing} is not a bearing variable")

    @property
    def weight(self) -> float:
        return 1.0 / (self.stddev * self.stddev)

    @property
    def keys(self) -> tuple[VariableKey, ...]:
        assert self.bearing is not None, "bearing assigned at graph build"
        return (self.translation_i, self.translation_j, self.bearing)


Factor = RelativeRotationFactor | RelativeTranslationFactor | RangeFactor


@dataclass(frozen=True)
class FactorGraph:
    """Immutable factor graph over a fixed ambient dimension d in {2, 3}."""

    decls: tuple[VariableDecl, ...]
    factors: tuple[Factor, ...]
    d: int

    def __post_init__(self):
        object.__setattr__(
            self, "_decl_by_key", MappingProxyType({dc.key: dc for dc in self.decls})
        )

    def decl_for(self, key: VariableKey) -> VariableDecl:
        return self._decl_by_key[key]

    def __contains__(self, key: VariableKey) -> bool:
        return key in self._decl_by_key

    @property
    def keys(self) -> tuple[VariableKey, ...]:
        return tuple(dc.key for dc in self.decls)

    @property
    def has_range_factors(self) -> bool:
        return any(isinstance(f, RangeFactor) for f in self.factors)

    def pose_indices(self) -> list[int]:
        return sorted(dc.key.index for dc in self.decls if dc.key.role == POSE_ROTATION)


class GraphError(ValueError):
    """Raised when a graph fails structural validation at build time."""


def _check_connected(decls: tuple[VariableDecl, ...], factors: tuple[Factor, ...]) -> None:
    parent: dict[VariableKey, VariableKey] = {dc.key: dc.key for dc in decls}

    def find(k: VariableKey) -> VariableKey:
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    def union(a: VariableKey, b: VariableKey) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    for factor in factors:
        keys = factor.keys
        for other in keys[1:]:
            union(keys[0], other)
    roots = {find(k) for k in parent}
    if len(roots) > 1:
        raise GraphError(f"graph is disconnected ({len(roots)} components)")


def build_graph(
    decls: Iterable[VariableDecl], factors: Iterable[Factor], d: int
) -> FactorGraph:
    """Validate and freeze a factor graph.

    Generates one unit-bearing auxiliary per range factor (input range factors
    must leave their bearing unset), checks that every factor endpoint is
    declared with a compatible kind, that measurement dimensions match d, and
    that the graph forms a single connected component.
    """
    if d not in (2, 3):
        raise GraphError(f"ambient dimension must be 2 or 3, got {d}")
    decls = tuple(decls)
    seen: set[VariableKey] = set()
    for dc in decls:
        if dc.key in seen:
            raise GraphError(f"duplicate declaration of {dc.key}")
        if dc.key.role == BEARING:
            raise GraphError("bearing auxiliaries are generated, do not declare them")
        seen.add(dc.key)

    declared = {dc.key: dc for dc in decls}
    out_factors: list[Factor] = []
    aux_decls: list[VariableDecl] = []
    n_bearings = 0
    for factor in factors:
        if isinstance(factor, RangeFactor):
            if factor.bearing is not None:
                raise GraphError("range factor bearings are assigned at build time")
            key = VariableKey(BEARING, n_bearings)
            n_bearings += 1
            factor = replace(factor, bearing=key)
            aux_decls.append(VariableDecl(key, UNIT_BEARING))
        elif isinstance(factor, RelativeRotationFactor):
            if factor.measurement.shape != (d, d):
                raise GraphError(
                    f"rotation measurement shape {factor.measurement.shape} != ({d}, {d})"
                )
        elif isinstance(factor, RelativeTranslationFactor):
            if factor.measurement.shape != (d,):
                raise GraphError(
                    f"translation measurement shape {factor.measurement.shape} != ({d},)"
                )
        else:
            raise GraphError(f"unknown factor type {type(factor).__name__}")
        for key in factor.keys:
            if key.role != BEARING and key not in declared:
                raise GraphError(f"factor references undeclared variable {key}")
        out_factors.append(factor)

    all_decls = decls + tuple(aux_decls)
    if not all_decls:
        raise GraphError("graph has no variables")
    _check_connected(all_decls, tuple(out_factors))
    return FactorGraph(all_decls, tuple(out_factors), d)


@dataclass(frozen=True)
class LiftedGraph:
    """The same graph with its variables re-domained at rank p >= d."""

    base: FactorGraph
    p: int

    def __post_init__(self):
        if self.p < self.base.d:
            raise ValueError(f"rank {self.p} below ambient dimension {self.base.d}")

    @property
    def decls(self) -> tuple[VariableDecl, ...]:
        return self.base.decls

    @property
    def factors(self) -> tuple[Factor, ...]:
        return self.base.factors

    @property
    def d(self) -> int:
        return self.base.d

    def decl_for(self, key: VariableKey) -> VariableDecl:
        return self.base.decl_for(key)


def lift_graph(graph: FactorGraph | LiftedGraph, p: int) -> LiftedGraph:
    base = graph.base if isinstance(graph, LiftedGraph) else graph
    return LiftedGraph(base, p)


_KIND_POINT = {ROTATION: StiefelPoint, TRANSLATION: EuclideanPoint, UNIT_BEARING: SpherePoint}


@dataclass(frozen=True)
class LiftedAssignment:
    """Immutable map from variable keys to manifold points at a common rank p."""

    points: Mapping[VariableKey, ManifoldPoint]
    p: int

    def __post_init__(self):
        points = dict(self.points)
        for key, point in points.items():
            if point.p != self.p:
                raise ValueError(f"{key} has rank {point.p}, expected {self.p}")
        object.__setattr__(self, "points", MappingProxyType(points))

    def __getitem__(self, key: VariableKey) -> ManifoldPoint:
        return self.points[key]

    def __iter__(self):
        return iter(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def validate_for(self, lifted: LiftedGraph) -> None:
        """Raise unless this assignment covers exactly the graph's variables."""
        if self.p != lifted.p:
            raise ValueError(f"assignment rank {self.p} != graph rank {lifted.p}")
        keys = set(self.points)
        declared = set(lifted.base.keys)
        if keys != declared:
            missing = declared - keys
            extra = keys - declared
            raise ValueError(f"assignment mismatch (missing {missing}, extra {extra})")
        for dc in lifted.decls:
            point = self.points[dc.key]
            if not isinstance(point, _KIND_POINT[dc.kind]):
                raise ValueError(f"{dc.key} expects {dc.kind}, got {type(point).__name__}")
            if isinstance(point, StiefelPoint) and point.d != lifted.d:
                raise ValueError(f"{dc.key} has {point.d} columns, expected {lifted.d}")

    def aggregate(self, index_map) -> np.ndarray:
        """Stack all blocks into the r x p aggregate matrix.

        Rotation blocks enter as the transpose of their stored p x d matrix so
        each variable occupies contiguous rows; translations and bearings each
        occupy a single row.
        """
        out = np.zeros((index_map.total_rows, self.p))
        for entry in index_map.entries:
            point = self.points[entry.key]
            sl = slice(entry.offset, entry.offset + entry.rows)
            if isinstance(point, StiefelPoint):
                out[sl] = point.matrix.T
            else:
                out[sl] = point.vector
        return out

    @classmethod
    def from_aggregate(cls, aggregate: np.ndarray, index_map) -> "LiftedAssignment":
        """Rebuild typed points from aggregate rows (validates feasibility)."""
        p = aggregate.shape[1]
        points: dict[VariableKey, ManifoldPoint] = {}
        for entry in index_map.entries:
            block = aggregate[entry.offset : entry.offset + entry.rows]
            if entry.kind == ROTATION:
                points[entry.key] = StiefelPoint(block.T)
            elif entry.kind == UNIT_BEARING:
                points[entry.key] = SpherePoint(block[0])
            else:
                points[entry.key] = EuclideanPoint(block[0])
        return cls(points, p)

    def lift(self) -> "LiftedAssignment":
        """Zero-pad every point one rank higher."""
        return LiftedAssignment(
            {key: lift_rank(point) for key, point in self.points.items()}, self.p + 1
        )

    def with_updates(
        self, updates: Mapping[VariableKey, ManifoldPoint]
    ) -> "LiftedAssignment":
        merged = dict(self.points)
        merged.update(updates)
        return LiftedAssignment(merged, self.p)


_KIND_MANIFOLD = {ROTATION: STIEFEL, TRANSLATION: EUCLIDEAN, UNIT_BEARING: SPHERE}


def random_initialization(lifted: LiftedGraph, rng) -> LiftedAssignment:
    """Independent uniform/Gaussian draws for every variable at rank p."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    points = {
        dc.key: random_point(_KIND_MANIFOLD[dc.kind], lifted.d, lifted.p, rng)
        for dc in lifted.decls
    }
    return LiftedAssignment(points, lifted.p)


def _embed_rotation(rot: np.ndarray, p: int) -> StiefelPoint:
    d = rot.shape[0]
    return StiefelPoint(np.vstack([rot, np.zeros((p - d, d))]))


def _embed_vector(vec: np.ndarray, p: int) -> EuclideanPoint:
    d = vec.shape[0]
    return EuclideanPoint(np.concatenate([vec, np.zeros(p - d)]))


def odometry_initialization(
    graph: FactorGraph | LiftedGraph,
    p: int,
    *,
    rng=0,
    landmark_positions: Mapping[VariableKey, np.ndarray] | None = None,
) -> LiftedAssignment:
    """Compose poses along the trajectory and embed them at rank p.

    Pose 0 sits at the identity; each subsequent pose composes the relative
    measurement between consecutive indices (either edge direction works).
    Landmarks take their supplied position when one is given, otherwise the
    position implied by their first relative-translation observation, otherwise
    a point at the measured range from their first range observation along a
    seeded random direction.  Bearings point from t_i to t_j; exactly
    coincident endpoints fall back to a seeded random unit vector.
    """
    base = graph.base if isinstance(graph, LiftedGraph) else graph
    d = base.d
    if p < d:
        raise ValueError(f"rank {p} below ambient dimension {d}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    landmark_positions = dict(landmark_positions or {})

    pose_idx = base.pose_indices()
    if pose_idx and pose_idx != list(range(pose_idx[0], pose_idx[0] + len(pose_idx))):
        raise GraphError("pose indices are not consecutive; cannot chain odometry")

    rot_steps: dict[tuple[int, int], RelativeRotationFactor] = {}
    trans_steps: dict[tuple[int, int], RelativeTranslationFactor] = {}
    for factor in base.factors:
        if isinstance(factor, RelativeRotationFactor):
            pair = (factor.rotation_i.index, factor.rotation_j.index)
            rot_steps.setdefault(pair, factor)
        elif isinstance(factor, RelativeTranslationFactor):
            if (
                factor.translation_i.role == POSE_TRANSLATION
                and factor.translation_j.role == POSE_TRANSLATION
            ):
                pair = (factor.translation_i.index, factor.translation_j.index)
                trans_steps.setdefault(pair, factor)

    rotations: dict[int, np.ndarray] = {}
    translations: dict[int, np.ndarray] = {}
    if pose_idx:
        first = pose_idx[0]
        rotations[first] = np.eye(d)
        translations[first] = np.zeros(d)
    for k in pose_idx[1:]:
        prev = k - 1
        forward = rot_steps.get((prev, k))
        backward = rot_steps.get((k, prev))
        if forward is not None:
            rotations[k] = rotations[prev] @ forward.measurement
        elif backward is not None:
            rotations[k] = rotations[prev] @ backward.measurement.T
        else:
            raise GraphError(f"missing odometry rotation between poses {prev} and {k}")
        t_forward = trans_steps.get((prev, k))
        t_backward = trans_steps.get((k, prev))
        step = t_forward if t_forward is not None else t_backward
        if step is None:
            raise GraphError(f"missing odometry translation between poses {prev} and {k}")
        anchor = rotations.get(step.rotation_i.index)
        if anchor is None:
            raise GraphError(
                f"odometry translation between poses {prev} and {k} is anchored at "
                f"uninitialized rotation {step.rotation_i}"
            )
        sign = 1.0 if step is t_forward else -1.0
        translations[k] = translations[prev] + sign * (anchor @ step.measurement)

    points: dict[VariableKey, ManifoldPoint] = {}
    for idx, rot in rotations.items():
        points[pose_rotation(idx)] = _embed_rotation(rot, p)
        points[pose_translation(idx)] = _embed_vector(translations[idx], p)

    def translation_value(key: VariableKey) -> np.ndarray | None:
        point = points.get(key)
        return None if point is None else point.vector

    for dc in base.decls:
        if dc.key.role != LANDMARK:
            continue
        if dc.key in landmark_positions:
            position = np.asarray(landmark_positions[dc.key], dtype=float)
            if position.shape != (d,):
                raise ValueError(f"landmark position for {dc.key} must have shape ({d},)")
            points[dc.key] = _embed_vector(position, p)
            continue
        placed = False
        for factor in base.factors:
            if not isinstance(factor, RelativeTranslationFactor):
                continue
            anchor_rot = rotations.get(factor.rotation_i.index)
            if anchor_rot is None:
                continue
            if factor.translation_j == dc.key:
                t_i = translation_value(factor.translation_i)
                if t_i is not None:
                    points[dc.key] = _embed_vector(
                        t_i[:d] + anchor_rot @ factor.measurement, p
                    )
                    placed = True
                    break
            elif factor.translation_i == dc.key:
                t_j = translation_value(factor.translation_j)
                if t_j is not None:
                    points[dc.key] = _embed_vector(
                        t_j[:d] - anchor_rot @ factor.measurement, p
                    )
                    placed = True
                    break
        if placed:
            continue
        for factor in base.factors:
            if not isinstance(factor, RangeFactor):
                continue
            other = None
            if factor.translation_i == dc.key:
                other = translation_value(factor.translation_j)
            elif factor.translation_j == dc.key:
                other = translation_value(factor.translation_i)
            if other is not None:
                direction = rng.standard_normal(d)
                direction /= np.linalg.norm(direction)
                points[dc.key] = _embed_vector(
                    other[:d] + factor.measured_range * direction, p
                )
                placed = True
                break
        if not placed:
            points[dc.key] = _embed_vector(np.zeros(d), p)

    for factor in base.factors:
        if not isinstance(factor, RangeFactor):
            continue
        t_i = translation_value(factor.translation_i)
        t_j = translation_value(factor.translation_j)
        assert t_i is not None and t_j is not None
        diff = t_j - t_i
        norm = float(np.linalg.norm(diff))
        if norm < DEGENERATE_NORM:
            diff = rng.standard_normal(p)
            norm = float(np.linalg.norm(diff))
        points[factor.bearing] = SpherePoint(diff / norm)

    return LiftedAssignment(points, p)
