"""Manifold primitives: projections, retractions, sampling, rank lifts."""
import numpy as np
import pytest

from certigraph.manifolds import (
    EUCLIDEAN,
    SPHERE,
    STIEFEL,
    EuclideanPoint,
    SpherePoint,
    StiefelPoint,
    lift_rank,
    project_to_tangent,
    random_point,
    retract,
    tangent_basis,
    tangent_dim,
)
from helpers import dense_tangent_projector


def test_stiefel_rejects_non_orthonormal_columns():
    with pytest.raises(ValueError):
        StiefelPoint(np.array([[1.0, 0.0], [0.0, 0.5], [0.0, 0.0]]))
    with pytest.raises(ValueError):  # more columns than rows
        StiefelPoint(np.eye(3)[:2])


def test_sphere_rejects_non_unit_vector():
    with pytest.raises(ValueError):
        SpherePoint(np.array([1.0, 1.0]))


def test_points_are_read_only():
    point = StiefelPoint(np.eye(3)[:, :2])
    with pytest.raises(ValueError):
        point.matrix[0, 0] = 2.0


def test_projection_examples():
    # Projecting the point itself annihilates it on the Stiefel manifold.
    m = StiefelPoint(np.eye(4)[:, :2])
    assert np.allclose(project_to_tangent(m, m.matrix).data, 0.0, atol=1e-14)
    # Sphere at e1: the e1 component of the ambient vector is removed.
    u = SpherePoint(np.array([1.0, 0.0, 0.0]))
    out = project_to_tangent(u, np.array([1.0, 1.0, 0.0]))
    assert np.allclose(out.data, [0.0, 1.0, 0.0], atol=1e-15)
    # Euclidean projection is the identity.
    e = EuclideanPoint(np.array([2.0, -1.0]))
    assert np.array_equal(project_to_tangent(e, np.array([5.0, 7.0])).data, [5.0, 7.0])


@pytest.mark.parametrize("seed", range(6))
def test_projection_matches_dense_normal_space_oracle(seed):
    """Closed-form projection equals I - N pinv(N) built from FD constraint normals."""
    rng = np.random.default_rng(seed)
    for point in (
        random_point(STIEFEL, 3, 5, rng),
        random_point(STIEFEL, 2, 4, rng),
        random_point(SPHERE, 0, 4, rng),
    ):
        projector = dense_tangent_projector(point)
        shape = point.matrix.shape if isinstance(point, StiefelPoint) else point.vector.shape
        ambient = rng.standard_normal(shape)
        expected = (projector @ ambient.ravel()).reshape(shape)
        got = project_to_tangent(point, ambient).data
        assert np.max(np.abs(got - expected)) <= 1e-10


@pytest.mark.parametrize("seed", range(4))
def test_projection_idempotent_and_self_adjoint(seed):
    rng = np.random.default_rng(100 + seed)
    for point in (random_point(STIEFEL, 3, 6, rng), random_point(SPHERE, 0, 5, rng)):
        shape = point.matrix.shape if isinstance(point, StiefelPoint) else point.vector.shape
        a = rng.standard_normal(shape)
        b = rng.standard_normal(shape)
        pa = project_to_tangent(point, a).data
        pb = project_to_tangent(point, b).data
        assert np.max(np.abs(project_to_tangent(point, pa).data - pa)) <= 1e-12
        assert abs(np.sum(pa * b) - np.sum(a * pb)) <= 1e-12 * max(1.0, np.sum(np.abs(a * b)))


def test_retract_zero_tangent_returns_point_unchanged():
    rng = np.random.default_rng(7)
    for point in (
        random_point(STIEFEL, 2, 4, rng),
        random_point(SPHERE, 0, 3, rng),
        random_point(EUCLIDEAN, 0, 3, rng),
    ):
        shape = point.matrix.shape if isinstance(point, StiefelPoint) else point.vector.shape
        assert retract(point, np.zeros(shape)) is point


def test_retract_sphere_example():
    u = SpherePoint(np.array([1.0, 0.0, 0.0]))
    out = retract(u, np.array([0.0, 1.0, 0.0]))
    assert np.allclose(out.vector, np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0), atol=1e-15)


def test_retract_rejects_non_tangent_input():
    u = SpherePoint(np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        retract(u, np.array([1.0, 0.0]))  # radial, not tangent
    m = StiefelPoint(np.eye(3)[:, :2])
    with pytest.raises(ValueError):
        retract(m, m.matrix)


@pytest.mark.parametrize("seed", range(5))
def test_retract_first_order_agreement_decays_quadratically(seed):
    """dist(retract(x, tV), x + tV) shrinks like t^2."""
    rng = np.random.default_rng(200 + seed)
    for point in (random_point(STIEFEL, 3, 5, rng), random_point(SPHERE, 0, 4, rng)):
        shape = point.matrix.shape if isinstance(point, StiefelPoint) else point.vector.shape
        tangent = project_to_tangent(point, rng.standard_normal(shape))
        errs = []
        for t in (1e-2, 1e-3, 1e-4):
            moved = retract(point, tangent, scale=t)
            arr = moved.matrix if isinstance(moved, StiefelPoint) else moved.vector
            base = point.matrix if isinstance(point, StiefelPoint) else point.vector
            errs.append(np.linalg.norm(arr - (base + t * tangent.data)))
        # one decade in t buys at least ~1.7 decades in error until rounding
        assert errs[1] <= errs[0] / 50.0 + 1e-14
        assert errs[2] <= errs[1] / 50.0 + 1e-14


def test_retract_preserves_constraints_in_bulk():
    rng = np.random.default_rng(3)
    for _ in range(2500):
        kind = rng.choice([STIEFEL, SPHERE, EUCLIDEAN])
        p = int(rng.integers(2, 7))
        d = int(rng.integers(2, min(p, 3) + 1))
        point = random_point(kind, d, p, rng)
        shape = point.matrix.shape if kind == STIEFEL else point.vector.shape
        tangent = project_to_tangent(point, rng.standard_normal(shape))
        scale = float(rng.uniform(0.0, 5.0))
        moved = retract(point, tangent, scale=scale)
        if kind == STIEFEL:
            gram = moved.matrix.T @ moved.matrix
            assert np.max(np.abs(gram - np.eye(d))) <= 1e-10
        elif kind == SPHERE:
            assert abs(np.linalg.norm(moved.vector) - 1.0) <= 1e-10


def test_random_stiefel_square_has_unit_determinant_magnitude():
    rng = np.random.default_rng(11)
    for _ in range(50):
        point = random_point(STIEFEL, 3, 3, rng)
        assert abs(abs(np.linalg.det(point.matrix)) - 1.0) <= 1e-10


def test_random_sphere_is_centered():
    rng = np.random.default_rng(12)
    samples = np.array([random_point(SPHERE, 0, 3, rng).vector for _ in range(20000)])
    assert np.max(np.abs(samples.mean(axis=0))) <= 0.03


def test_lift_rank_examples():
    lifted = lift_rank(SpherePoint(np.array([1.0, 0.0])))
    assert np.array_equal(lifted.vector, [1.0, 0.0, 0.0])
    stiefel = lift_rank(StiefelPoint(np.eye(2)))
    assert np.array_equal(stiefel.matrix, np.vstack([np.eye(2), np.zeros((1, 2))]))
    assert stiefel.p == 3 and stiefel.d == 2
    assert np.array_equal(lift_rank(EuclideanPoint(np.array([2.0]))).vector, [2.0, 0.0])


def test_tangent_dims_match_manifold_dimensions():
    assert tangent_dim(StiefelPoint(np.eye(5)[:, :3])) == 3 * 5 - 6
    assert tangent_dim(StiefelPoint(np.eye(2))) == 1
    assert tangent_dim(SpherePoint(np.eye(4)[0])) == 3
    assert tangent_dim(EuclideanPoint(np.zeros(4))) == 4


@pytest.mark.parametrize("seed", range(4))
def test_tangent_basis_is_orthonormal_and_tangent(seed):
    rng = np.random.default_rng(300 + seed)
    for point in (
        random_point(STIEFEL, 3, 5, rng),
        random_point(STIEFEL, 2, 2, rng),
        random_point(SPHERE, 0, 4, rng),
    ):
        basis = tangent_basis(point)
        q = basis.shape[0]
        assert q == tangent_dim(point)
        flat = basis.reshape(q, -1)
        assert np.max(np.abs(flat @ flat.T - np.eye(q))) <= 1e-12
        for vec in basis:
            projected = project_to_tangent(point, vec).data
            assert np.max(np.abs(projected - vec)) <= 1e-12
