"""Graph-Laplacian spectra, power spectral density and the heat-kernel blur."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .diffusion import DiffusionSchedule, blur
from .geometry import remove_mean
from .molio import MoleculeRecord, build_mapping

PROCESSES = ("blurring", "gaussian", "heat")


@dataclass(frozen=True)
class LaplacianSpectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self) -> int:
        return int(self.eigenvalues.shape[0])


def graph_laplacian(molecule: MoleculeRecord) -> np.ndarray:
    """Combinatorial ``D - A`` of the bond graph."""
    n = molecule.n_atoms
    A = np.zeros((n, n))
    for b in molecule.bonds:
        A[b.i, b.j] = A[b.j, b.i] = 1.0
    return np.diag(A.sum(axis=1)) - A


def eigendecompose(L, tol: float = 1e-12) -> LaplacianSpectrum:
    """Cyclic Jacobi eigendecomposition, ascending, largest-|entry| of each vector positive."""
    L = np.ascontiguousarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {L.shape}")
    if not np.allclose(L, L.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(L).max())):
        raise ValueError("matrix is not symmetric")
    w, V = _kernels.jacobi_eigh(0.5 * (L + L.T), tol)
    order = np.argsort(w, kind="stable")
    w, V = w[order], V[:, order]
    pick = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[pick, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return LaplacianSpectrum(w, V * signs)


def psd(x, spectrum: LaplacianSpectrum) -> np.ndarray:
    """Per-eigenvector power averaged over the three axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != spectrum.n:
        raise ValueError(f"{x.shape[0]} rows vs spectrum of size {spectrum.n}")
    c = spectrum.eigenvectors.T @ x.reshape(spectrum.n, -1)
    return np.sum(c * c, axis=1) / 3.0


def heat_kernel_blur(x, spectrum: LaplacianSpectrum, tau: float) -> np.ndarray:
    """``V exp(-lambda tau) V^T x`` applied columnwise."""
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    x = np.asarray(x, dtype=np.float64)
    V = spectrum.eigenvectors
    return V @ (np.exp(-spectrum.eigenvalues * tau)[:, None] * (V.T @ x))


def gaussian_sigma(schedule: DiffusionSchedule) -> float:
    """Per-step std of the comparison Gaussian walk: unit total variance (1 A^2) at T."""
    return 1.0 / np.sqrt(schedule.T)


def trajectory_psd(process: str, molecule: MoleculeRecord, x0, coarse, schedule: DiffusionSchedule,
                   seed=0, heat_scale: float = 1.0) -> np.ndarray:
    """(T+1) x n table of PSD(x_t), t = 0..T, states centred before the transform.

    ``heat`` uses tau = heat_scale * t / T so the full schedule spans tau in [0, heat_scale].
    """
    if process not in PROCESSES:
        raise ValueError(f"unknown process {process!r}; expected one of {PROCESSES}")
    spec = eigendecompose(graph_laplacian(molecule))
    x0 = np.asarray(x0, dtype=np.float64)
    T = schedule.T
    rows = []
    if process == "blurring":
        mapping = build_mapping(coarse.partition)
        for t in range(T + 1):
            rows.append(psd(remove_mean(blur(x0, coarse, mapping, t, T)), spec))
    elif process == "gaussian":
        rng = np.random.default_rng(seed)
        sg = gaussian_sigma(schedule)
        x = x0.copy()
        rows.append(psd(remove_mean(x), spec))
        for _ in range(T):
            x = x + rng.normal(0.0, sg, size=x.shape)
            rows.append(psd(remove_mean(x), spec))
    else:
        for t in range(T + 1):
            rows.append(psd(remove_mean(heat_kernel_blur(x0, spec, heat_scale * t / T)), spec))
    return np.array(rows)


def write_psd_csv(table, path) -> None:
    table = np.asarray(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *(f"psd_{i}" for i in range(table.shape[1]))])
        for t, row in enumerate(table):
            w.writerow([t, *(repr(float(v)) for v in row)])
