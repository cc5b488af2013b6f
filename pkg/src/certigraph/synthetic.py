"""Synthetic problem generation under the estimation model's noise laws.

Ground-truth poses sit on a chain or serpentine grid with uniformly random
orientations.  Measurements are sampled from the generative models the
objective assumes: rotation measurements are right-multiplied by isotropic
Langevin noise, translation and range measurements get additive Gaussian
noise.  Generation is deterministic given the seed — every draw flows through
a single generator in a fixed order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np
from scipy.spatial.transform import Rotation

from .graph import (
    POSE_TRANSLATION,
    ROTATION,
    TRANSLATION,
    FactorGraph,
    LiftedAssignment,
    RangeFactor,
    RelativeRotationFactor,
    RelativeTranslationFactor,
    VariableDecl,
    VariableKey,
    build_graph,
    landmark,
    pose_rotation,
    pose_translation,
)
from .manifolds import EuclideanPoint, SpherePoint, StiefelPoint

#: Above this concentration the 3D sampler switches from angle-rejection to a
#: tangent-space Gaussian (per-axis variance 1/(2*kappa)), whose law matches
#: the Langevin distribution to high accuracy once the mass concentrates.
TANGENT_GAUSSIAN_MIN_KAPPA = 5.0


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise levels: zero std-devs and infinite concentration
    mean exact measurements with unit factor weights."""

    translation_stddev: float = 0.0
    rotation_kappa: float = math.inf
    range_stddev: float = 0.0

    def __post_init__(self):
        if self.translation_stddev < 0.0 or self.range_stddev < 0.0:
            raise ValueError("standard deviations must be nonnegative")
        if not self.rotation_kappa > 0.0:
            raise ValueError(
                "rotation concentration must be positive (math.inf for exact)"
            )

    @classmethod
    def from_angular_stddev(
        cls,
        angular_stddev: float,
        *,
        translation_stddev: float = 0.0,
        range_stddev: float = 0.0,
    ) -> "NoiseSpec":
        """Convert an angular std-dev proxy (radians) via kappa = 1/(2*sigma^2)."""
        if angular_stddev < 0.0:
            raise ValueError("angular std-dev must be nonnegative")
        kappa = math.inf if angular_stddev == 0.0 else 1.0 / (2.0 * angular_stddev**2)
        return cls(translation_stddev, kappa, range_stddev)

    @property
    def exact(self) -> bool:
        return (
            self.translation_stddev == 0.0
            and math.isinf(self.rotation_kappa)
            and self.range_stddev == 0.0
        )


@dataclass(frozen=True)
class SyntheticProblem:
    """A generated graph with its ground truth embedded at rank p = d."""

    graph: FactorGraph
    truth: LiftedAssignment
    metadata: Mapping[str, object]


def _rotation_2d(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0.0:
        q[:, -1] = -q[:, -1]
    return q


def _rejection_sample_angle(kappa: float, rng: np.random.Generator) -> float:
    """Sample the 3D rotation angle, density on [0, pi] proportional to
    (1 - cos t) * exp(2*kappa*cos t), by rejection from the uniform."""
    if kappa >= 0.25:
        peak = math.acos(1.0 - 1.0 / (2.0 * kappa))
    else:
        peak = math.pi
    bound = (1.0 - math.cos(peak)) * math.exp(2.0 * kappa * math.cos(peak))
    while True:
        angle = rng.uniform(0.0, math.pi)
        density = (1.0 - math.cos(angle)) * math.exp(2.0 * kappa * math.cos(angle))
        if rng.uniform(0.0, bound) <= density:
            return angle


def sample_langevin_rotation(
    d: int, kappa: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw from the isotropic Langevin distribution on SO(d) centered at I.

    d = 2 reduces exactly to a von Mises angle with concentration 2*kappa.
    d = 3 uses a tangent-space Gaussian above ``TANGENT_GAUSSIAN_MIN_KAPPA``
    and rejection sampling of the angle density below it.
    """
    if not kappa > 0.0:
        raise ValueError("concentration must be positive")
    if math.isinf(kappa):
        return np.eye(d)
    if d == 2:
        return _rotation_2d(float(rng.vonmises(0.0, 2.0 * kappa)))
    if d == 3:
        if kappa > TANGENT_GAUSSIAN_MIN_KAPPA:
            sigma = math.sqrt(1.0 / (2.0 * kappa))
            return Rotation.from_rotvec(sigma * rng.standard_normal(3)).as_matrix()
        angle = _rejection_sample_angle(kappa, rng)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        return Rotation.from_rotvec(angle * axis).as_matrix()
    raise ValueError(f"unsupported dimension {d}")


def _sampler_name(d: int, kappa: float) -> str:
    if math.isinf(kappa):
        return "exact"
    if d == 2:
        return "von-mises-angle"
    return "tangent-gaussian" if kappa > TANGENT_GAUSSIAN_MIN_KAPPA else "angle-rejection"


def _serpentine_cells(size: int, d: int) -> list[tuple[int, ...]]:
    """Grid cells ordered so consecutive entries are lattice neighbors."""
    rows: list[tuple[int, int]] = []
    for i in range(size):
        cols = range(size) if i % 2 == 0 else range(size - 1, -1, -1)
        rows.extend((i, j) for j in cols)
    if d == 2:
        return [tuple(c) for c in rows]
    cells: list[tuple[int, ...]] = []
    for k in range(size):
        layer = rows if k % 2 == 0 else rows[::-1]
        cells.extend((i, j, k) for (i, j) in layer)
    return cells


def _lattice_closure_candidates(cells: list[tuple[int, ...]]) -> list[tuple[int, int]]:
    """Lattice-adjacent pose pairs that are not consecutive on the backbone."""
    index_of = {cell: n for n, cell in enumerate(cells)}
    pairs = []
    for cell, n in index_of.items():
        for axis in range(len(cell)):
            neighbor = tuple(
                c + 1 if k == axis else c for k, c in enumerate(cell)
            )
            m = index_of.get(neighbor)
            if m is None or abs(m - n) == 1:
                continue
            pairs.append((min(n, m), max(n, m)))
    pairs.sort()
    return pairs


def generate_synthetic(
    kind: str,
    size: int,
    noise: NoiseSpec = NoiseSpec(),
    loop_probability: float = 0.3,
    seed: int = 0,
    *,
    dimension: int | None = None,
    num_landmarks: int = 0,
    landmark_obs_probability: float = 0.0,
    range_probability: float = 0.0,
) -> SyntheticProblem:
    """Generate a pose graph (optionally with landmarks and ranges) plus truth.

    `kind` selects the backbone: "chain" (`size` poses in a line, `dimension`
    2 or 3), "grid2d" (`size` x `size` serpentine), or "grid3d" (`size`^3
    serpentine).  Loop closures are sampled with `loop_probability` — lattice
    neighbors for grids, random earlier poses for chains.  Landmarks are
    observed by relative-translation and/or range factors with the given
    per-pose probabilities; every landmark is guaranteed at least one
    observation.
    """
    if kind not in ("chain", "grid2d", "grid3d"):
        raise ValueError(f"unknown kind {kind!r}")
    if size < 2:
        raise ValueError("size must be at least 2")
    if not 0.0 <= loop_probability <= 1.0:
        raise ValueError("loop probability must lie in [0, 1]")
    if num_landmarks < 0:
        raise ValueError("landmark count must be nonnegative")
    if num_landmarks > 0 and landmark_obs_probability <= 0.0 and range_probability <= 0.0:
        raise ValueError("landmarks need a positive observation probability")
    if kind == "chain":
        d = 2 if dimension is None else dimension
        if d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {d}")
    else:
        d = 2 if kind == "grid2d" else 3
        if dimension is not None and dimension != d:
            raise ValueError(f"{kind} fixes dimension {d}, got {dimension}")

    if kind == "chain":
        positions = np.zeros((size, d))
        positions[:, 0] = np.arange(size)
        candidates: list[tuple[int, int]] = []
    else:
        cells = _serpentine_cells(size, d)
        positions = np.array(cells, dtype=float)
        candidates = _lattice_closure_candidates(cells)
    n = positions.shape[0]

    rng = np.random.default_rng(seed)
    rotations = [_random_rotation(d, rng) for _ in range(n)]

    low = positions.min(axis=0) - 0.5
    high = positions.max(axis=0) + 0.5
    landmark_positions = rng.uniform(low, high, size=(num_landmarks, d))

    edges = [(k, k + 1) for k in range(n - 1)]
    if kind == "chain":
        for i in range(2, n):
            if rng.random() < loop_probability:
                edges.append((int(rng.integers(0, i - 1)), i))
    else:
        edges.extend(pair for pair in candidates if rng.random() < loop_probability)

    kappa = 1.0 if math.isinf(noise.rotation_kappa) else noise.rotation_kappa
    tau = (
        1.0
        if noise.translation_stddev == 0.0
        else 1.0 / noise.translation_stddev**2
    )
    range_sigma = 1.0 if noise.range_stddev == 0.0 else noise.range_stddev

    factors = []
    for i, j in edges:
        measured_rot = rotations[i].T @ rotations[j]
        if not math.isinf(noise.rotation_kappa):
            measured_rot = measured_rot @ sample_langevin_rotation(
                d, noise.rotation_kappa, rng
            )
        factors.append(
            RelativeRotationFactor(
                pose_rotation(i), pose_rotation(j), measured_rot, kappa
            )
        )
        measured_t = rotations[i].T @ (positions[j] - positions[i])
        if noise.translation_stddev > 0.0:
            measured_t = measured_t + noise.translation_stddev * rng.standard_normal(d)
        factors.append(
            RelativeTranslationFactor(
                pose_rotation(i),
                pose_translation(i),
                pose_translation(j),
                measured_t,
                tau,
            )
        )

    def observe_translation(pose: int, lm: int) -> None:
        measured = rotations[pose].T @ (landmark_positions[lm] - positions[pose])
        if noise.translation_stddev > 0.0:
            measured = measured + noise.translation_stddev * rng.standard_normal(d)
        factors.append(
            RelativeTranslationFactor(
                pose_rotation(pose),
                pose_translation(pose),
                landmark(lm),
                measured,
                tau,
            )
        )

    def observe_range(pose: int, lm: int) -> None:
        true_range = float(
            np.linalg.norm(landmark_positions[lm] - positions[pose])
        )
        if noise.range_stddev == 0.0:
            if true_range <= 0.0:
                raise ValueError("coincident range endpoints with exact noise")
            measured = true_range
        else:
            while True:
                measured = true_range + noise.range_stddev * rng.standard_normal()
                if measured > 0.0:
                    break
        factors.append(
            RangeFactor(pose_translation(pose), landmark(lm), measured, range_sigma)
        )

    for lm in range(num_landmarks):
        observed = False
        for pose in range(n):
            if landmark_obs_probability > 0.0 and rng.random() < landmark_obs_probability:
                observe_translation(pose, lm)
                observed = True
            if range_probability > 0.0 and rng.random() < range_probability:
                observe_range(pose, lm)
                observed = True
        if not observed:
            nearest = int(
                np.argmin(np.linalg.norm(positions - landmark_positions[lm], axis=1))
            )
            if landmark_obs_probability > 0.0:
                observe_translation(nearest, lm)
            else:
                observe_range(nearest, lm)

    decls = []
    for k in range(n):
        decls.append(VariableDecl(pose_rotation(k), ROTATION))
        decls.append(VariableDecl(pose_translation(k), TRANSLATION))
    for lm in range(num_landmarks):
        decls.append(VariableDecl(landmark(lm), TRANSLATION))
    graph = build_graph(decls, factors, d)

    def position_of(key: VariableKey) -> np.ndarray:
        if key.role == POSE_TRANSLATION:
            return positions[key.index]
        return landmark_positions[key.index]

    points: dict[VariableKey, object] = {}
    for k in range(n):
        points[pose_rotation(k)] = StiefelPoint(rotations[k])
        points[pose_translation(k)] = EuclideanPoint(positions[k])
    for lm in range(num_landmarks):
        points[landmark(lm)] = EuclideanPoint(landmark_positions[lm])
    for factor in graph.factors:
        if isinstance(factor, RangeFactor):
            delta = position_of(factor.translation_j) - position_of(
                factor.translation_i
            )
            norm = float(np.linalg.norm(delta))
            if norm > 1e-12:
                direction = delta / norm
            else:
                direction = rng.standard_normal(d)
                direction /= np.linalg.norm(direction)
            points[factor.bearing] = SpherePoint(direction)

    metadata = MappingProxyType(
        {
            "kind": kind,
            "dimension": d,
            "size": size,
            "seed": seed,
            "num_poses": n,
            "num_landmarks": num_landmarks,
            "rotation_sampler": _sampler_name(d, noise.rotation_kappa),
            "noise": MappingProxyType(
                {
                    "translation_stddev": noise.translation_stddev,
                    "rotation_kappa": noise.rotation_kappa,
                    "range_stddev": noise.range_stddev,
                }
            ),
        }
    )
    return SyntheticProblem(graph, LiftedAssignment(points, d), metadata)
