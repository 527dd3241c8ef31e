import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ebd.coarse import CoarseStructure
from ebd.diffusion import DiffusionSchedule
from ebd.fragmenting import decompose, fragment_features
from ebd.geometry import remove_mean
from ebd.molio import MoleculeRecord, build_mapping
from ebd.spectral import (
    eigendecompose,
    gaussian_sigma,
    graph_laplacian,
    heat_kernel_blur,
    psd,
    trajectory_psd,
    write_psd_csv,
)

from conftest import chain

seeds = st.integers(0, 2**31)


def cycle(n):
    return MoleculeRecord(f"ring{n}", [("C", 1)] * n, [(i, (i + 1) % n, 0) for i in range(n)], [])


def test_laplacian_examples(toy_corpus):
    np.testing.assert_array_equal(graph_laplacian(chain(2)), [[1, -1], [-1, 1]])
    np.testing.assert_array_equal(graph_laplacian(cycle(3)), 3 * np.eye(3) - np.ones((3, 3)))
    for mol in toy_corpus[:10]:
        assert not graph_laplacian(mol).sum(axis=1).any()


def test_eigen_examples():
    np.testing.assert_allclose(eigendecompose(graph_laplacian(chain(2))).eigenvalues, [0, 2], atol=1e-12)
    np.testing.assert_allclose(eigendecompose(np.eye(4)).eigenvalues, np.ones(4), atol=1e-14)
    for n in (3, 5, 6, 9):
        ref = np.sort(2 - 2 * np.cos(2 * np.pi * np.arange(n) / n))
        np.testing.assert_allclose(eigendecompose(graph_laplacian(cycle(n))).eigenvalues, ref, atol=1e-10)
    path = np.sort(2 - 2 * np.cos(np.pi * np.arange(6) / 6))
    np.testing.assert_allclose(eigendecompose(graph_laplacian(chain(6))).eigenvalues, path, atol=1e-10)
    with pytest.raises(ValueError):
        eigendecompose(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_spectrum_invariants(toy_corpus):
    for mol in toy_corpus[:15]:
        L = graph_laplacian(mol)
        s = eigendecompose(L)
        V, w = s.eigenvectors, s.eigenvalues
        assert np.linalg.norm(L @ V - V * w) < 1e-8
        assert np.linalg.norm(V.T @ V - np.eye(s.n)) < 1e-8
        assert abs(w[0]) < 1e-10 and np.all(np.diff(w) >= -1e-12)
        np.testing.assert_allclose(np.abs(V[:, 0]), 1 / np.sqrt(s.n), atol=1e-8)
        idx = np.argmax(np.abs(V), axis=0)
        assert np.all(V[idx, np.arange(s.n)] > 0)


@given(seeds)
def test_psd_properties(seed):
    rng = np.random.default_rng(seed)
    s = eigendecompose(graph_laplacian(chain(7)))
    x = rng.normal(size=(7, 3))
    p = psd(x, s)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(np.sum(x * x) / 3, rel=1e-10)
    assert psd(remove_mean(x), s)[0] < 1e-18
    const = np.tile(rng.normal(size=3), (7, 1))
    assert np.all(psd(const, s)[1:] < 1e-20)


def test_heat_kernel():
    s = eigendecompose(graph_laplacian(chain(2)))
    x = np.array([[0.0, 1, -3], [2.0, 5, 1]])
    np.testing.assert_allclose(heat_kernel_blur(x, s, 0.0), x, atol=1e-14)
    tau = np.log(2) / 2
    mean = x.mean(axis=0)
    np.testing.assert_allclose(heat_kernel_blur(x, s, tau), mean + np.exp(-2 * tau) * (x - mean), atol=1e-14)
    with pytest.raises(ValueError):
        heat_kernel_blur(x, s, -1.0)


@given(seeds)
def test_heat_semigroup_and_limit(seed):
    rng = np.random.default_rng(seed)
    s = eigendecompose(graph_laplacian(cycle(6)))
    x = rng.normal(size=(6, 3))
    a, b = rng.uniform(0, 2, size=2)
    np.testing.assert_allclose(heat_kernel_blur(heat_kernel_blur(x, s, a), s, b), heat_kernel_blur(x, s, a + b), atol=1e-8)
    np.testing.assert_allclose(heat_kernel_blur(x, s, 1e3), np.tile(x.mean(axis=0), (6, 1)), atol=1e-6)


def _gt_coarse(mol, vocab, x0):
    part = decompose(mol, vocab)
    return CoarseStructure(build_mapping(part).centroids(x0), fragment_features(mol, part), part)


def test_blurring_conserves_fragment_projection(toy_corpus, vocab12):
    mol = toy_corpus[4]
    x0 = remove_mean(mol.conformers[0])
    coarse = _gt_coarse(mol, vocab12, x0)
    mp = build_mapping(coarse.partition)
    P = mp.dense() @ mp.dense_pinv()
    sched = DiffusionSchedule(T=20)
    from ebd.diffusion import blur

    norms = [np.linalg.norm(P @ blur(x0, coarse, mp, t, 20)) for t in range(21)]
    np.testing.assert_allclose(norms, norms[0], atol=1e-10)
    table = trajectory_psd("blurring", mol, x0, coarse, sched)
    assert table.shape == (21, mol.n_atoms)


def test_gaussian_expected_psd_is_linear_in_t(toy_corpus):
    # every non-constant mode gains sigma_g^2 per step in expectation
    mol = toy_corpus[4]
    x0 = remove_mean(mol.conformers[0])
    sched = DiffusionSchedule(T=10)
    runs = np.array([trajectory_psd("gaussian", mol, x0, None, sched, seed=s) for s in range(2000)])
    expected = runs[0, 0][None, 1:] + gaussian_sigma(sched) ** 2 * np.arange(11)[:, None]
    sem = runs[:, :, 1:].std(axis=0) / np.sqrt(len(runs))
    assert np.all(np.abs(runs.mean(axis=0)[:, 1:] - expected) < 5 * sem + 1e-12)


def test_gaussian_psd_monotone_over_100_seeds(toy_corpus):
    """Mean PSD over 100 seeds rises monotonically at >= 80% of modes (default schedule)."""
    mol = toy_corpus[4]
    x0 = remove_mean(mol.conformers[0])
    sched = DiffusionSchedule()
    mean = np.mean([trajectory_psd("gaussian", mol, x0, None, sched, seed=s) for s in range(100)], axis=0)
    increasing = np.all(np.diff(mean[:, 1:], axis=0) > 0, axis=0)
    assert increasing.mean() >= 0.8, f"monotone at {increasing.mean():.0%} of modes"


def test_heat_process_decay(toy_corpus):
    mol = toy_corpus[4]
    x0 = remove_mean(mol.conformers[0])
    s = eigendecompose(graph_laplacian(mol))
    table = trajectory_psd("heat", mol, x0, None, DiffusionSchedule(T=10), heat_scale=2.0)
    for t in range(11):
        np.testing.assert_allclose(table[t], np.exp(-2 * s.eigenvalues * 2.0 * t / 10) * table[0], atol=1e-8)
    with pytest.raises(ValueError):
        trajectory_psd("ihdm", mol, x0, None, DiffusionSchedule())


def test_psd_csv(tmp_path):
    path = tmp_path / "p.csv"
    write_psd_csv(np.arange(6.0).reshape(2, 3), path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "psd_0", "psd_1", "psd_2"]
    assert rows[2] == ["1", "3.0", "4.0", "5.0"]
