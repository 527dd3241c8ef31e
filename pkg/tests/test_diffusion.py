import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ebd.diffusion import DiffusionSchedule, blur, centered_noise, forward_sample, prior_sample
from ebd.geometry import random_rotation
from ebd.molio import Partition, build_mapping

seeds = st.integers(0, 2**31)


def _case(rng, n=None, m=None):
    n = n or int(rng.integers(2, 15))
    m = m or int(rng.integers(1, n + 1))
    part = Partition.from_assignment(np.concatenate([np.arange(m), rng.integers(0, m, n - m)]))
    return rng.normal(size=(n, 3)), build_mapping(part), rng.normal(size=(m, 3))


def test_schedule_defaults_and_validation():
    s = DiffusionSchedule()
    assert (s.T, s.sigma, s.delta) == (50, 0.01, 0.0125)
    for bad in ({"T": 0}, {"T": 2.5}, {"sigma": -1}, {"delta": float("nan")}):
        with pytest.raises(ValueError):
            DiffusionSchedule(**bad)


def test_blur_midpoint_example():
    mp = build_mapping(Partition.from_assignment([0, 0]))
    out = blur([[0, 0, 0], [2, 0, 0]], np.array([[1.0, 0, 0]]), mp, 25, 50)
    np.testing.assert_array_equal(out, [[0.5, 0, 0], [1.5, 0, 0]])


def test_blur_endpoints_and_range(rng):
    x0, mp, xf = _case(rng)
    np.testing.assert_array_equal(blur(x0, xf, mp, 0, 10), x0)
    np.testing.assert_array_equal(blur(x0, xf, mp, 10, 10), mp.lift(xf))
    for t in (-1, 11, 2.5):
        with pytest.raises(ValueError):
            blur(x0, xf, mp, t, 10)


@given(seeds)
def test_blur_properties(seed):
    rng = np.random.default_rng(seed)
    x0, mp, xf = _case(rng)
    T = 20
    R, v, a = random_rotation(rng), rng.normal(size=3), rng.normal()
    dist = []
    for t in range(T + 1):
        b = blur(x0, xf, mp, t, T)
        np.testing.assert_allclose(blur(x0 @ R.T + v, xf @ R.T + v, mp, t, T), b @ R.T + v, atol=1e-12)
        np.testing.assert_allclose(blur(a * x0, a * xf, mp, t, T), a * b, atol=1e-12)
        dist.append(np.linalg.norm(b - mp.lift(xf)))
    np.testing.assert_allclose(dist, dist[0] * (1 - np.arange(T + 1) / T), atol=1e-12)
    # centroid preservation with ground-truth fragment coordinates
    c0 = mp.centroids(x0)
    for t in range(T + 1):
        np.testing.assert_allclose(mp.centroids(blur(x0, c0, mp, t, T)), c0, atol=1e-12)


def test_forward_sample_zero_sigma_and_centering(rng):
    x0, mp, xf = _case(rng, 6, 3)
    s0 = DiffusionSchedule(T=10, sigma=0.0)
    np.testing.assert_array_equal(forward_sample(x0, xf, mp, 4, s0, rng), blur(x0, xf, mp, 4, 10))
    out = forward_sample(x0, xf, mp, 4, DiffusionSchedule(T=10, sigma=0.3), rng)
    np.testing.assert_allclose(out.sum(axis=0), blur(x0, xf, mp, 4, 10).sum(axis=0), atol=1e-9)


def test_noise_variance_monte_carlo():
    rng = np.random.default_rng(0)
    n, sigma = 5, 0.01
    eps = np.stack([centered_noise(rng, n, sigma) for _ in range(100_000)])
    std = eps.std(axis=0) / np.sqrt(1 - 1 / n)
    assert np.all((std > 0.97 * sigma) & (std < 1.03 * sigma))


def test_prior_sample():
    rng = np.random.default_rng(1)
    part = Partition.from_assignment([0, 0, 1, 1, 1])
    mp, xf = build_mapping(part), np.array([[1.0, 0, 0], [-1.0, 0, 0]]) * np.array([[3], [2]])
    x = prior_sample(xf, mp, DiffusionSchedule(delta=0.0), rng)
    np.testing.assert_array_equal(x, mp.lift(xf))
    assert np.array_equal(x[0], x[1]) and np.array_equal(x[2], x[4])
    s = DiffusionSchedule(delta=0.0125)
    eps = np.stack([prior_sample(xf, mp, s, rng) - mp.lift(xf) for _ in range(50_000)])
    std = eps.std(axis=0) / np.sqrt(1 - 1 / 5)
    assert np.all((std > 0.97 * s.delta) & (std < 1.03 * s.delta))
