"""Numba vs numpy timings for the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both forms are called directly, so one process measures both. The numba
column is empty when numba is missing or ``EBD_DISABLE_NUMBA=1``. First
calls (compilation) are excluded.
"""

import argparse
import timeit

import numpy as np

from ebd import _accel, _kernels
from ebd.coarse import target_distances
from ebd.molio import ToyCorpusSpec, generate_toy_corpus


def _cases(rng):
    mol = generate_toy_corpus(ToyCorpusSpec(count=1, min_atoms=12, max_atoms=12, conformers=1), 3)[0]
    D = target_distances(mol)
    W = np.where(D > 0, 1.0 / np.maximum(D, 1e-12) ** 2, 0.0)
    V = -W.copy()
    np.fill_diagonal(V, W.sum(axis=1))
    Vp = np.linalg.pinv(V)
    X0 = rng.standard_normal((12, 3)) * D.max() / 2
    S = rng.standard_normal((24, 24))
    S = S + S.T
    A = [rng.standard_normal((20, 3)) for _ in range(10)]
    B = [rng.standard_normal((20, 3)) for _ in range(20)]
    P, Q = rng.standard_normal((30, 3)), rng.standard_normal((30, 3))
    C = rng.random((8, 8))
    return {
        "kabsch 30 atoms": lambda k: k["kabsch"](P, Q),
        "rmsd_matrix 10x20 sets of 20": lambda k: k["rmsd"](np.array(A), np.array(B)),
        "hungarian 8x8": lambda k: k["hungarian"](C),
        "jacobi_eigh 24x24": lambda k: k["jacobi"](S, 1e-12, 100),
        "smacof 12 atoms (500 it cap)": lambda k: k["smacof"](D, W, Vp, X0, 500, 1e-6),
    }


def _kernels_for(suffix):
    return {
        "kabsch": getattr(_kernels, f"kabsch_{suffix}"),
        "rmsd": getattr(_kernels, f"rmsd_matrix_{suffix}"),
        "hungarian": getattr(_kernels, f"hungarian_{suffix}"),
        "jacobi": getattr(_kernels, f"jacobi_eigh_{suffix}"),
        "smacof": getattr(_kernels, f"smacof_{suffix}"),
    }


def _time(fn, repeat):
    fn()
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    cases = _cases(np.random.default_rng(0))
    backends = {"numpy": _kernels_for("np")}
    if _accel.HAS_NUMBA:
        backends["numba"] = _kernels_for("nb")
    print(f"active backend: {_accel.backend()}")
    print(f"{'kernel':32s} {'numpy (us)':>12s} {'numba (us)':>12s} {'speedup':>8s}")
    for name, case in cases.items():
        t = {b: _time(lambda k=k: case(k), args.repeat) * 1e6 for b, k in backends.items()}
        nb = t.get("numba")
        nb_s = f"{nb:12.1f}" if nb is not None else f"{'-':>12s}"
        sp = f"{t['numpy'] / nb:7.1f}x" if nb else f"{'-':>8s}"
        print(f"{name:32s} {t['numpy']:12.1f} {nb_s} {sp}")


if __name__ == "__main__":
    main()
