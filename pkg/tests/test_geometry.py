import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment as scipy_lsa
from scipy.spatial.transform import Rotation

from ebd.geometry import aligned_rmsd, kabsch, linear_sum_assignment, random_rotation, remove_mean, rmsd_matrix

seeds = st.integers(0, 2**31)


def _rot_z(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])


def test_remove_mean_example():
    np.testing.assert_array_equal(remove_mean([[1, 1, 1], [3, 3, 3]]), [[-1, -1, -1], [1, 1, 1]])


@given(seeds)
def test_remove_mean_properties(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(int(rng.integers(1, 20)), 3)) * 10
    c = remove_mean(x)
    assert np.abs(c.sum(axis=0)).max() < 1e-12
    np.testing.assert_allclose(remove_mean(c), c, atol=1e-13)
    R = random_rotation(rng)
    np.testing.assert_allclose(remove_mean(x @ R.T + rng.normal(size=3)), c @ R.T, atol=1e-11)


def test_kabsch_recovers_z_rotation(rng):
    P = remove_mean(rng.normal(size=(6, 3)))
    Rz = _rot_z(90)
    R = kabsch(P, P @ Rz.T)
    np.testing.assert_allclose(R, Rz, atol=1e-10)
    assert aligned_rmsd(P, P @ Rz.T) < 1e-10
    np.testing.assert_allclose(kabsch(P, P), np.eye(3), atol=1e-12)


@given(seeds)
def test_kabsch_matches_scipy_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 25))
    P, Q = remove_mean(rng.normal(size=(n, 3))), remove_mean(rng.normal(size=(n, 3)))
    R = kabsch(P, Q)
    # scipy finds the rotation taking P's rows onto Q's rows
    ref, _ = Rotation.align_vectors(Q, P)
    np.testing.assert_allclose(R, ref.as_matrix(), atol=1e-8)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
    assert abs(np.linalg.det(R) - 1) < 1e-10


def test_kabsch_dominates_random_rotations(rng):
    P = remove_mean(rng.normal(size=(6, 3)))
    Q = remove_mean(P @ random_rotation(rng).T + rng.normal(size=(6, 3)) * 0.3)
    best = aligned_rmsd(P, Q)
    for _ in range(1000):
        R = random_rotation(rng)
        assert best <= np.sqrt(np.mean(np.sum((P @ R.T - Q) ** 2, axis=1))) + 1e-12


def test_reflection_never_returned(rng):
    P = remove_mean(rng.normal(size=(7, 3)))
    mirror = P * np.array([1, 1, -1])
    R = kabsch(P, mirror)
    assert abs(np.linalg.det(R) - 1) < 1e-10
    assert aligned_rmsd(P, mirror) > 0.01


def test_collinear_returns_proper_rotation(rng):
    P = remove_mean(np.outer(np.arange(5.0), [1, 2, 3]))
    Q = remove_mean(np.outer(np.arange(5.0), [0, 0, 1]))
    R = kabsch(P, Q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
    assert abs(np.linalg.det(R) - 1) < 1e-10
    np.testing.assert_allclose(P @ R.T, Q * np.linalg.norm([1, 2, 3]), atol=1e-10)


def test_degenerate_prefers_identity():
    P = remove_mean(np.outer(np.arange(4.0), [1, 0, 0]))
    np.testing.assert_allclose(kabsch(P, P), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(kabsch(np.zeros((3, 3)), np.zeros((3, 3))), np.eye(3))


def test_nan_rejected():
    P = np.zeros((3, 3))
    P[0, 0] = np.nan
    with pytest.raises(ValueError):
        kabsch(P, np.zeros((3, 3)))


def test_aligned_rmsd_two_point_case():
    # centred: +-0.5 vs +-1 along x, residual 0.5 on both atoms; sqrt((0.25 + 0.25) / 2)
    assert aligned_rmsd([[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [2, 0, 0]]) == pytest.approx(0.5, abs=1e-12)


def test_aligned_rmsd_shape_mismatch():
    with pytest.raises(ValueError):
        aligned_rmsd(np.zeros((3, 3)), np.zeros((4, 3)))


@given(seeds)
def test_aligned_rmsd_symmetric_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 20))
    P, Q = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    assert abs(aligned_rmsd(P, Q) - aligned_rmsd(Q, P)) < 1e-9
    assert aligned_rmsd(P, P @ random_rotation(rng).T + rng.normal(size=3) * 5) < 1e-9
    assert aligned_rmsd(P, P) == pytest.approx(0.0, abs=1e-12)


def test_rmsd_matrix_matches_pairwise(rng):
    A = [rng.normal(size=(8, 3)) for _ in range(3)]
    B = [rng.normal(size=(8, 3)) + 4 for _ in range(5)]
    D = rmsd_matrix(A, B)
    assert D.shape == (3, 5)
    ref = np.array([[aligned_rmsd(a, b) for b in B] for a in A])
    np.testing.assert_allclose(D, ref, atol=1e-12)


def test_random_rotation_properties():
    for s in range(1000):
        R = random_rotation(s)
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-10
        assert abs(np.linalg.det(R) - 1) < 1e-10
    np.testing.assert_array_equal(random_rotation(42), random_rotation(42))


def test_random_rotation_isotropic():
    rng = np.random.default_rng(0)
    mean = np.mean([random_rotation(rng)[:, 0] for _ in range(100_000)], axis=0)
    assert np.linalg.norm(mean) < 0.02


def test_assignment_examples():
    perm = linear_sum_assignment(np.array([[1.0, 2.0], [2.0, 1.0]]))
    np.testing.assert_array_equal(perm, [0, 1])
    np.testing.assert_array_equal(linear_sum_assignment(np.eye(4) * -1 + 1), np.arange(4))


@given(seeds, st.integers(1, 6))
def test_assignment_bruteforce_and_scipy(seed, k):
    C = np.random.default_rng(seed).random((k, k))
    perm = linear_sum_assignment(C)
    cost = C[np.arange(k), perm].sum()
    best = min(C[np.arange(k), list(p)].sum() for p in itertools.permutations(range(k)))
    assert cost == pytest.approx(best, abs=1e-12)
    r, c = scipy_lsa(C)
    assert cost == pytest.approx(C[r, c].sum(), abs=1e-12)


def test_assignment_rejects_bad_input():
    with pytest.raises(ValueError):
        linear_sum_assignment(np.ones((2, 3)))
    with pytest.raises(ValueError):
        linear_sum_assignment(np.array([[1.0, np.inf], [0.0, 1.0]]))
