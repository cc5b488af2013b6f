"""Shared oracles and builders for the test suite.

Oracles here deliberately avoid the package's fast paths: tangent projections
via numerically built constraint normals, multiplier fits via dense least
squares, constraint matrices by explicit enumeration, eigenvalues via dense
factorizations.  Tests compare the package against these independent routes.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from certigraph.graph import (
    RangeFactor,
    RelativeRotationFactor,
    RelativeTranslationFactor,
    VariableDecl,
    build_graph,
    landmark,
    pose_rotation,
    pose_translation,
    ROTATION,
    TRANSLATION,
    UNIT_BEARING,
)
from certigraph.manifolds import EuclideanPoint, SpherePoint, StiefelPoint

DATASET_ENV = "CERTIGRAPH_DATASETS"


def dataset_path(filename: str) -> Path:
    """Locate a benchmark dataset file or skip the calling test.

    Benchmark files are not distributed with the repository; point
    $CERTIGRAPH_DATASETS at a directory containing them (falls back to
    ./datasets under the repo root).
    """
    root = os.environ.get(DATASET_ENV, str(Path(__file__).resolve().parent.parent / "datasets"))
    path = Path(root) / filename
    if not path.exists():
        pytest.skip(
            f"benchmark dataset {filename} not present (searched {path}); "
            f"set ${DATASET_ENV} to a directory holding the benchmark files"
        )
    return path


def rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random element of SO(d)."""
    gauss = rng.standard_normal((d, d))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose_graph(
    n: int,
    d: int,
    rng: np.random.Generator,
    *,
    rotation_noise: float = 0.0,
    translation_noise: float = 0.0,
    loop_probability: float = 0.3,
    kappa: float = 1.0,
    tau: float = 1.0,
):
    """Connected random pose graph with known ground truth.

    Noise is added as a tangent-space Gaussian on rotations (angle scale
    `rotation_noise`) and additive Gaussian on translations.  Returns
    (graph, true_rotations, true_translations).
    """
    rotations = [random_rotation(d, rng) for _ in range(n)]
    positions = [rng.normal(scale=2.0, size=d) for _ in range(n)]

    edges = [(i, i + 1) for i in range(n - 1)]
    for i in range(n):
        for j in range(i + 2, n):
            if rng.random() < loop_probability:
                edges.append((i, j))

    decls = []
    for i in range(n):
        decls.append(VariableDecl(pose_rotation(i), ROTATION))
        decls.append(VariableDecl(pose_translation(i), TRANSLATION))

    factors = []
    for i, j in edges:
        rel_rot = rotations[i].T @ rotations[j]
        if rotation_noise > 0.0:
            rel_rot = rel_rot @ small_rotation(d, rotation_noise, rng)
        rel_t = rotations[i].T @ (positions[j] - positions[i])
        if translation_noise > 0.0:
            rel_t = rel_t + rng.normal(scale=translation_noise, size=d)
        factors.append(
            RelativeRotationFactor(pose_rotation(i), pose_rotation(j), rel_rot, kappa)
        )
        factors.append(
            RelativeTranslationFactor(
                pose_rotation(i), pose_translation(i), pose_translation(j), rel_t, tau
            )
        )
    graph = build_graph(decls, factors, d)
    return graph, rotations, positions


def small_rotation(d: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation near the identity with tangent-Gaussian angle of size `scale`."""
    if d == 2:
        return rot2(rng.normal(scale=scale))
    from scipy.spatial.transform import Rotation

    return Rotation.from_rotvec(rng.normal(scale=scale, size=3)).as_matrix()


def range_aided_graph(
    n_poses: int,
    n_landmarks: int,
    d: int,
    rng: np.random.Generator,
    *,
    rotation_noise: float = 0.02,
    translation_noise: float = 0.02,
    range_noise: float = 0.02,
    loop_probability: float = 0.3,
):
    """Pose chain plus landmarks observed only through range measurements."""
    graph, rotations, positions = random_pose_graph(
        n_poses,
        d,
        rng,
        rotation_noise=rotation_noise,
        translation_noise=translation_noise,
        loop_probability=loop_probability,
        kappa=25.0,
        tau=25.0,
    )
    decls = [dc for dc in graph.decls if dc.key.role != "bearing"]
    factors = list(graph.factors)
    lm_positions = []
    for l in range(n_landmarks):
        decls.append(VariableDecl(landmark(l), TRANSLATION))
        spot = positions[rng.integers(n_poses)] + rng.normal(scale=1.5, size=d)
        lm_positions.append(spot)
        observers = rng.choice(n_poses, size=min(3, n_poses), replace=False)
        for i in observers:
            true_range = float(np.linalg.norm(spot - positions[i]))
            measured = true_range + (rng.normal(scale=range_noise) if range_noise else 0.0)
            while measured <= 0.0:
                measured = true_range + rng.normal(scale=range_noise)
            factors.append(
                RangeFactor(
                    pose_translation(i),
                    landmark(l),
                    measured,
                    range_noise if range_noise > 0.0 else 1.0,
                )
            )
    rebuilt = build_graph(decls, factors, d)
    return rebuilt, rotations, positions, lm_positions


def enumerate_constraints(objective) -> list[tuple[np.ndarray, float]]:
    """Explicit dense (A_m, b_m) list for every feasibility constraint.

    Rotation blocks contribute the d(d+1)/2 symmetric-basis constraints of
    B B^T = I; bearings one unit-norm constraint; translations none.
    """
    imap = objective.index_map
    r = imap.total_rows
    out: list[tuple[np.ndarray, float]] = []
    for entry in imap.entries:
        if entry.kind == ROTATION:
            o, d = entry.offset, entry.rows
            for a in range(d):
                for b in range(a, d):
                    mat = np.zeros((r, r))
                    if a == b:
                        mat[o + a, o + a] = 1.0
                    else:
                        mat[o + a, o + b] = 0.5
                        mat[o + b, o + a] = 0.5
                    out.append((mat, 1.0 if a == b else 0.0))
        elif entry.kind == UNIT_BEARING:
            mat = np.zeros((r, r))
            mat[entry.offset, entry.offset] = 1.0
            out.append((mat, 1.0))
    return out


def multipliers_to_vector(objective, multipliers) -> np.ndarray:
    """Coordinates of multiplier blocks in the enumerate_constraints order."""
    coords: list[float] = []
    for entry in objective.index_map.entries:
        if entry.kind == ROTATION:
            lam = multipliers.rotation[entry.key]
            d = entry.rows
            for a in range(d):
                for b in range(a, d):
                    coords.append(lam[a, a] if a == b else 2.0 * lam[a, b])
        elif entry.kind == UNIT_BEARING:
            coords.append(float(multipliers.bearing[entry.key]))
    return np.array(coords)


def dense_tangent_projector(point) -> np.ndarray:
    """Projector onto the tangent space built from finite-difference normals.

    The feasibility constraints are quadratic, so central differences of the
    constraint values give their gradients exactly (up to rounding); the
    projector is I - N pinv(N) over the stacked normals.
    """
    if isinstance(point, StiefelPoint):
        x0 = point.matrix
        shape = x0.shape
        p, d = shape

        def constraints(m):
            vals = []
            g = m.T @ m
            for a in range(d):
                for b in range(a, d):
                    vals.append(g[a, b] - (1.0 if a == b else 0.0))
            return np.array(vals)

    elif isinstance(point, SpherePoint):
        x0 = point.vector
        shape = x0.shape

        def constraints(v):
            return np.array([v @ v - 1.0])

    elif isinstance(point, EuclideanPoint):
        n = point.vector.size
        return np.eye(n)
    else:
        raise TypeError(type(point).__name__)

    n = x0.size
    h = 1e-4
    normals = []
    flat0 = x0.ravel()
    n_constraints = constraints(x0).size
    grad = np.zeros((n_constraints, n))
    for k in range(n):
        bump = np.zeros(n)
        bump[k] = h
        plus = constraints((flat0 + bump).reshape(shape))
        minus = constraints((flat0 - bump).reshape(shape))
        grad[:, k] = (plus - minus) / (2.0 * h)
    normals = grad.T  # columns span the normal space
    projector = np.eye(n) - normals @ np.linalg.pinv(normals)
    return projector


def gauge_align_poses(est_rot, est_pos, true_rot, true_pos):
    """Global transform mapping estimate 0 onto truth 0; returns aligned copies."""
    g_rot = true_rot[0] @ est_rot[0].T
    g_pos = true_pos[0] - g_rot @ est_pos[0]
    aligned_rot = [g_rot @ r for r in est_rot]
    aligned_pos = [g_rot @ t + g_pos for t in est_pos]
    return aligned_rot, aligned_pos
