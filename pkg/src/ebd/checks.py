"""Self-test suite behind ``ebd check``: fast invariant checks over every module."""

from __future__ import annotations

import itertools
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import _accel, _kernels
from . import autodiff as ad
from .coarse import coarse_from_reference, embed_with_report, match_and_align
from .diffusion import DiffusionSchedule, blur, forward_sample
from .engine import OptimizerConfig, TrainState, adamw_update, loss, sample
from .evaluation import coverage_matching, wilcoxon_one_sided
from .fragmenting import build_vocabulary, canonical_key, decompose
from .geometry import aligned_rmsd, kabsch, linear_sum_assignment, random_rotation, remove_mean, rmsd_matrix
from .molio import (
    MoleculeRecord, Partition, ToyCorpusSpec, build_mapping, generate_toy_corpus, record_from_obj, record_to_line,
)
from .net import GraphBatch, NetworkConfig, forward, forward_batch, init_params, load_checkpoint, save_checkpoint
from .spectral import eigendecompose, graph_laplacian, heat_kernel_blur, psd

_REGISTRY = []


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def check(name):
    def deco(fn):
        _REGISTRY.append((name, fn))
        return fn

    return deco


def names() -> list:
    return [n for n, _ in _REGISTRY]


def _random_partition(rng, n, m):
    a = np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)])
    rng.shuffle(a)
    return Partition.from_assignment(a)


def _chain(n, elements=None):
    elements = elements or ["C"] * n
    from .molio import ELEMENTS

    return MoleculeRecord(
        "chain", [(e, ELEMENTS.index(e)) for e in elements], [(i, i + 1, 0) for i in range(n - 1)], []
    )


_TOY_CACHE = {}


def _toy(count=6):
    if count not in _TOY_CACHE:
        _TOY_CACHE[count] = generate_toy_corpus(ToyCorpusSpec(count=count, conformers=3), 11)
    return _TOY_CACHE[count]


def _tiny_net():
    cfg = NetworkConfig(layers=1, width=2, hops=2, time_dim=2, atom_types=2)
    mol = MoleculeRecord("t4", [("H", 0), ("C", 1), ("C", 1), ("H", 0)], [(0, 1, 0), (1, 2, 0), (2, 3, 0)], [])
    return cfg, mol, Partition.from_assignment([0, 0, 1, 1])


def _randomized(params, rng, scale=0.7):
    return {k: rng.normal(size=v.shape) * scale for k, v in params.items()}


def _small_net_case(seed):
    rng = np.random.default_rng(seed)
    mol = _toy()[seed % len(_toy())]
    vocab = build_vocabulary(_toy(), 10)
    part = decompose(mol, vocab)
    cfg = NetworkConfig(layers=2, width=16, time_dim=8)
    p = init_params(cfg, seed)
    p = {k: v + rng.normal(size=v.shape) * 0.1 for k, v in p.items()}
    x = remove_mean(mol.conformers[0] + rng.normal(size=(mol.n_atoms, 3)) * 0.3)
    return rng, mol, part, cfg, p, x


@check("mapping.pinv_left_inverse")
def _c_pinv():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 30))
        part = _random_partition(rng, n, int(rng.integers(1, min(n, 10) + 1)))
        mp = build_mapping(part)
        worst = max(worst, np.abs(mp.dense_pinv() @ mp.dense() - np.eye(part.m)).max())
    return worst < 1e-12, f"max |M+M - I| = {worst:.2e}"


@check("mapping.projector_idempotent")
def _c_proj():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 30))
        part = _random_partition(rng, n, int(rng.integers(1, min(n, 10) + 1)))
        mp = build_mapping(part)
        P = mp.dense() @ mp.dense_pinv()
        worst = max(worst, np.abs(P @ P - P).max())
    return worst < 1e-10, f"max |P^2 - P| = {worst:.2e}"


@check("molio.jsonl_roundtrip")
def _c_jsonl():
    import json

    ok = True
    for rec in _toy():
        line = record_to_line(rec)
        ok &= record_to_line(record_from_obj(json.loads(line))) == line
    return ok, f"{len(_toy())} records"


@check("fragmenting.vocab_deterministic")
def _c_vocab_det():
    a = build_vocabulary(_toy(), 12).to_json()
    b = build_vocabulary(_toy(), 12).to_json()
    return a == b, f"{len(a)} bytes"


@check("fragmenting.decompose_valid")
def _c_decomp():
    vocab = build_vocabulary(_toy(), 12)
    for mol in _toy():
        decompose(mol, vocab).validate(mol)
    return True, "all fragments connected and non-empty"


@check("fragmenting.canonical_relabel_invariant")
def _c_canon():
    rng = np.random.default_rng(2)
    els = ["C", "C", "N", "C", "O", "C"]
    bonds = [(0, 1, 0), (1, 2, 0), (2, 3, 1), (3, 4, 0), (3, 5, 0), (5, 0, 0)]
    ref = canonical_key(els, bonds)
    for _ in range(20):
        perm = rng.permutation(len(els))
        inv = np.argsort(perm)
        els2 = [els[perm[i]] for i in range(len(els))]
        bonds2 = [(int(inv[i]), int(inv[j]), o) for i, j, o in bonds]
        if canonical_key(els2, bonds2) != ref:
            return False, "key changed under relabelling"
    return True, ref.canonical_string


@check("geometry.kabsch_planted_recovery")
def _c_kabsch_planted():
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(50):
        P = rng.normal(size=(int(rng.integers(3, 20)), 3))
        R = random_rotation(rng)
        Q = P @ R.T + rng.normal(size=3)
        worst = max(worst, aligned_rmsd(P, Q))
    return worst < 1e-9, f"max RMSD {worst:.2e}"


@check("geometry.kabsch_optimality")
def _c_kabsch_opt():
    rng = np.random.default_rng(4)
    for _ in range(20):
        P = remove_mean(rng.normal(size=(8, 3)))
        Q = remove_mean(rng.normal(size=(8, 3)))
        best = aligned_rmsd(P, Q)
        for _ in range(50):
            R = random_rotation(rng)
            if np.sqrt(np.mean(np.sum((P @ R.T - Q) ** 2, axis=1))) < best - 1e-12:
                return False, "random rotation beat Kabsch"
    return True, "1000 random rotations never better"


@check("geometry.kabsch_proper")
def _c_kabsch_det():
    rng = np.random.default_rng(5)
    dets = []
    for _ in range(50):
        P = remove_mean(rng.normal(size=(6, 3)))
        Q = remove_mean(P * np.array([1, 1, -1]))
        dets.append(np.linalg.det(kabsch(P, Q)))
    return np.allclose(dets, 1.0), f"det range [{min(dets):.12f}, {max(dets):.12f}]"


@check("geometry.assignment_bruteforce")
def _c_assign():
    rng = np.random.default_rng(6)
    for _ in range(50):
        K = int(rng.integers(1, 6))
        C = rng.random((K, K))
        perm = linear_sum_assignment(C)
        best = min(sum(C[i, p[i]] for i in range(K)) for p in itertools.permutations(range(K)))
        if abs(C[np.arange(K), perm].sum() - best) > 1e-12:
            return False, f"suboptimal assignment for K={K}"
    return True, "50 random problems"


@check("coarse.embed_two_atoms")
def _c_embed2():
    X = embed_with_report(_chain(2), 0).coords
    d = float(np.linalg.norm(X[0] - X[1]))
    return abs(d - 1.54) < 1e-6, f"distance {d:.9f}"


@check("coarse.embed_deterministic")
def _c_embed_det():
    mol = _toy()[0]
    a = embed_with_report(mol, 7)
    b = embed_with_report(mol, 7)
    return bool(np.array_equal(a.coords, b.coords) and a.stress == b.stress), f"stress {a.stress:.3e}"


@check("coarse.rotation_commutes")
def _c_coarse_rot():
    rng = np.random.default_rng(8)
    mol = _toy()[1]
    part = decompose(mol, build_vocabulary(_toy(), 10))
    ref = mol.conformers[0]
    R = random_rotation(rng)
    a = coarse_from_reference(mol, part, ref @ R.T).frag_coords
    b = coarse_from_reference(mol, part, ref).frag_coords @ R.T
    err = np.abs(a - b).max()
    return err < 1e-10, f"max deviation {err:.2e}"


@check("coarse.matching_rigid_invariant")
def _c_match():
    rng = np.random.default_rng(9)
    mol = _toy()[2]
    refs = [embed_with_report(mol, [9, k]).coords for k in range(3)]
    a = [m.ref_index for m in match_and_align(list(mol.conformers), refs)]
    moved = [r @ random_rotation(rng).T + rng.normal(size=3) for r in refs]
    b = [m.ref_index for m in match_and_align(list(mol.conformers), moved)]
    return a == b, f"assignment {a}"


def _blur_case(rng):
    n = int(rng.integers(3, 15))
    part = _random_partition(rng, n, int(rng.integers(1, n + 1)))
    mp = build_mapping(part)
    x0 = remove_mean(rng.normal(size=(n, 3)))
    xf = mp.centroids(remove_mean(rng.normal(size=(n, 3))))
    return x0, xf, mp


@check("diffusion.blur_endpoints")
def _c_endpoints():
    rng = np.random.default_rng(10)
    for _ in range(100):
        x0, xf, mp = _blur_case(rng)
        T = int(rng.integers(1, 100))
        if not (np.array_equal(blur(x0, xf, mp, 0, T), x0) and np.array_equal(blur(x0, xf, mp, T, T), mp.lift(xf))):
            return False, "endpoint not bit-exact"
    return True, "100 cases bit-exact"


@check("diffusion.coarse_subspace_conserved")
def _c_subspace():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(30):
        x0, _, mp = _blur_case(rng)
        xf = mp.centroids(x0)
        T = 20
        ref = mp.project(x0)
        for t in range(T + 1):
            worst = max(worst, np.linalg.norm(mp.project(blur(x0, xf, mp, t, T)) - ref))
    return worst < 1e-10, f"max drift {worst:.2e}"


@check("diffusion.noise_centred")
def _c_noise():
    rng = np.random.default_rng(12)
    x0, xf, mp = _blur_case(rng)
    sched = DiffusionSchedule(10, 0.5, 0.5)
    xs = forward_sample(x0, xf, mp, 4, sched, rng)
    dev = np.abs(xs.sum(axis=0) - blur(x0, xf, mp, 4, 10).sum(axis=0)).max()
    return dev < 1e-9, f"column-sum deviation {dev:.2e}"


@check("net.identity_at_init")
def _c_identity():
    rng, mol, part, cfg, _, x = _small_net_case(0)
    p = init_params(cfg, 0)
    err = np.abs(forward(p, cfg, mol, part, x, 0.5) - x).max()
    return err < 1e-12, f"max deviation {err:.2e}"


@check("net.rotation_equivariance")
def _c_equiv():
    worst = 0.0
    for s in range(5):
        rng, mol, part, cfg, p, x = _small_net_case(s)
        R = random_rotation(rng)
        v = rng.normal(size=3)
        y = forward(p, cfg, mol, part, x, 0.3)
        y2 = forward(p, cfg, mol, part, remove_mean(x @ R.T + v), 0.3)
        worst = max(worst, np.linalg.norm(y @ R.T - y2) / np.linalg.norm(y))
    return worst < 1e-6, f"max relative error {worst:.2e}"


@check("net.feature_invariance")
def _c_feat():
    worst = 0.0
    for s in range(3):
        rng, mol, part, cfg, p, x = _small_net_case(s)
        R = random_rotation(rng)
        _, f1 = forward(p, cfg, mol, part, x, 0.7, return_features=True)
        _, f2 = forward(p, cfg, mol, part, x @ R.T, 0.7, return_features=True)
        for key in f1:
            worst = max(worst, max(np.abs(a - b).max() for a, b in zip(f1[key], f2[key])))
    return worst < 1e-8, f"max feature deviation {worst:.2e}"


@check("net.permutation_equivariance")
def _c_perm():
    rng, mol, part, cfg, p, x = _small_net_case(1)
    perm = rng.permutation(mol.n_atoms)
    inv = np.argsort(perm)
    atoms = [mol.atoms[perm[i]] for i in range(mol.n_atoms)]
    bonds = [(int(inv[b.i]), int(inv[b.j]), b.order) for b in mol.bonds]
    mol2 = MoleculeRecord(mol.id, atoms, bonds, [])
    part2 = Partition.from_assignment(np.asarray(part.assignment)[perm])
    y = forward(p, cfg, mol, part, x, 0.4)
    y2 = forward(p, cfg, mol2, part2, x[perm], 0.4)
    err = np.abs(y[perm] - y2).max()
    return err < 1e-10, f"max deviation {err:.2e}"


@check("net.gradient_finite_difference")
def _c_grad():
    cfg, mol, part = _tiny_net()
    rng = np.random.default_rng(13)
    p = _randomized(init_params(cfg, 0), rng)
    x0 = remove_mean(rng.normal(size=(4, 3)))
    xt = remove_mean(x0 + rng.normal(size=(4, 3)) * 0.5)
    batch = GraphBatch([mol], [part], cfg)
    R = kabsch(forward(p, cfg, mol, part, xt, 0.4), x0)

    def f(q):
        pred = forward_batch(q, cfg, batch, xt, [0.4])
        return ad.mean(ad.square(ad.sub(x0, ad.matmul(pred, R.T))))

    _, g = ad.gradient(p, f)
    worst = 0.0
    h = 1e-5
    for k, v in p.items():
        for idx in np.ndindex(v.shape):
            hi = dict(p)
            lo = dict(p)
            hi[k] = v.copy()
            lo[k] = v.copy()
            hi[k][idx] += h
            lo[k][idx] -= h
            fd = (float(f(hi).data) - float(f(lo).data)) / (2 * h)
            worst = max(worst, abs(fd - g[k][idx]) / max(abs(fd), 1e-7))
    return worst < 1e-4, f"{sum(v.size for v in p.values())} params, worst relative error {worst:.2e}"


@check("net.checkpoint_roundtrip")
def _c_ckpt():
    rng, mol, part, cfg, p, x = _small_net_case(2)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "p.ckpt")
        save_checkpoint(path, p, {"config": cfg.to_dict()})
        q, head = load_checkpoint(path)
    ok = set(p) == set(q) and all(np.array_equal(p[k], q[k]) for k in p) and head["config"] == cfg.to_dict()
    return ok, f"{len(p)} arrays"


@check("engine.loss_rigid_invariance")
def _c_loss_inv():
    rng = np.random.default_rng(14)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 12))
        x0 = remove_mean(rng.normal(size=(n, 3)))
        pr = remove_mean(rng.normal(size=(n, 3)))
        a = loss(x0, pr)
        b = loss(remove_mean(x0 @ random_rotation(rng).T + rng.normal(size=3)),
                 remove_mean(pr @ random_rotation(rng).T + rng.normal(size=3)))
        worst = max(worst, abs(a - b))
    return worst < 1e-8, f"max change {worst:.2e}"


@check("engine.reparameterisation_identity")
def _c_identity_b():
    rng = np.random.default_rng(15)
    worst = 0.0
    for _ in range(100):
        n, m, T = 6, 3, 50
        t = int(rng.integers(1, T + 1))
        part = _random_partition(rng, n, m)
        mp = build_mapping(part)
        x0, f, xf = rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        mu = (1 - (t - 1) / T) * f + ((t - 1) / T) * mp.lift(xf)
        lhs = np.sum((blur(x0, xf, mp, t - 1, T) - mu) ** 2)
        rhs = (1 - (t - 1) / T) ** 2 * np.sum((x0 - f) ** 2)
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(rhs)))
    return worst < 1e-10, f"max discrepancy {worst:.2e}"


@check("engine.oracle_sampler")
def _c_oracle():
    mol = _toy()[0]
    vocab = build_vocabulary(_toy(), 10)
    part = decompose(mol, vocab)
    x0 = remove_mean(mol.conformers[0])
    coarse = coarse_from_reference(mol, part, embed_with_report(mol, 0).coords)
    cfg = NetworkConfig(layers=1, width=4, time_dim=2)
    outs = sample(None, cfg, mol, coarse, DiffusionSchedule(10, 0.01, 0.0125), 2, 0,
                  predictor=lambda x, t: np.concatenate([x0, x0]))
    worst = max(aligned_rmsd(o, x0) for o in outs)
    return worst < 1e-6, f"final RMSD {worst:.2e}"


@check("engine.adamw_zero_gradient")
def _c_adam():
    rng = np.random.default_rng(16)
    p = {"w": rng.normal(size=(3, 4))}
    st = TrainState.fresh(p, 0)
    adamw_update(st, {"w": np.zeros((3, 4))}, OptimizerConfig(weight_decay=0.0))
    return bool(np.array_equal(st.params["w"], p["w"])), "parameters unchanged"


def _naive_cov_mat(gen, gt, delta):
    D = [[aligned_rmsd(g, c) for c in gen] for g in gt]
    rmin = [min(r) for r in D]
    pmin = [min(D[i][j] for i in range(len(gt))) for j in range(len(gen))]
    return (sum(v <= delta for v in rmin) / len(gt), sum(rmin) / len(gt),
            sum(v <= delta for v in pmin) / len(gen), sum(pmin) / len(gen))


@check("eval.coverage_oracle")
def _c_cov():
    rng = np.random.default_rng(17)
    for _ in range(30):
        n = int(rng.integers(3, 8))
        gt = [rng.normal(size=(n, 3)) for _ in range(int(rng.integers(1, 5)))]
        gen = [rng.normal(size=(n, 3)) for _ in range(int(rng.integers(1, 9)))]
        a = coverage_matching(gen, gt, 1.0)
        b = _naive_cov_mat(gen, gt, 1.0)
        if not np.allclose(a, b, rtol=0, atol=1e-12):
            return False, f"{a} vs {b}"
    return True, "30 random set pairs"


@check("eval.wilcoxon_extreme")
def _c_wilcoxon():
    p = wilcoxon_one_sided(np.arange(6) + 1.0, np.zeros(6))
    return abs(p - 1 / 64) < 1e-15, f"p = {p}"


@check("spectral.laplacian_rows")
def _c_lap():
    worst = max(np.abs(graph_laplacian(m).sum(axis=1)).max() for m in _toy())
    return worst == 0.0, "row sums zero"


@check("spectral.cycle_spectrum")
def _c_cycle():
    n = 7
    mol = MoleculeRecord("c7", [("C", 1)] * n, [(i, (i + 1) % n, 0) for i in range(n)], [])
    w = eigendecompose(graph_laplacian(mol)).eigenvalues
    ref = np.sort(2 - 2 * np.cos(2 * np.pi * np.arange(n) / n))
    return np.abs(w - ref).max() < 1e-10, f"max error {np.abs(w - ref).max():.2e}"


@check("spectral.parseval")
def _c_parseval():
    rng = np.random.default_rng(18)
    mol = _toy()[3]
    spec = eigendecompose(graph_laplacian(mol))
    x = rng.normal(size=(mol.n_atoms, 3))
    err = abs(psd(x, spec).sum() - np.sum(x * x) / 3)
    return err < 1e-10, f"error {err:.2e}"


@check("spectral.heat_semigroup")
def _c_semigroup():
    rng = np.random.default_rng(19)
    mol = _toy()[4]
    spec = eigendecompose(graph_laplacian(mol))
    x = rng.normal(size=(mol.n_atoms, 3))
    a = heat_kernel_blur(heat_kernel_blur(x, spec, 0.3), spec, 0.45)
    b = heat_kernel_blur(x, spec, 0.75)
    return np.abs(a - b).max() < 1e-8, f"max deviation {np.abs(a - b).max():.2e}"


@check("spectral.heat_psd_decay")
def _c_heat_psd():
    rng = np.random.default_rng(20)
    mol = _toy()[5]
    spec = eigendecompose(graph_laplacian(mol))
    x = rng.normal(size=(mol.n_atoms, 3))
    tau = 0.37
    err = np.abs(psd(heat_kernel_blur(x, spec, tau), spec) - np.exp(-2 * spec.eigenvalues * tau) * psd(x, spec)).max()
    return err < 1e-8, f"max deviation {err:.2e}"


@check("kernels.backends_agree")
def _c_backends():
    rng = np.random.default_rng(21)
    A = np.stack([remove_mean(rng.normal(size=(7, 3))) for _ in range(4)])
    B = np.stack([remove_mean(rng.normal(size=(7, 3))) for _ in range(5)])
    d1 = _kernels.rmsd_matrix_nb(A, B)
    d2 = _kernels.rmsd_matrix_np(A, B)
    C = rng.random((6, 6))
    same = np.array_equal(_kernels.hungarian_nb(C), _kernels.hungarian_np(C))
    err = np.abs(d1 - d2).max()
    return err < 1e-12 and same, f"backend={_accel.backend()}, rmsd diff {err:.2e}"


@check("geometry.rmsd_matrix_consistent")
def _c_rmsdmat():
    rng = np.random.default_rng(22)
    A = [rng.normal(size=(5, 3)) for _ in range(3)]
    B = [rng.normal(size=(5, 3)) for _ in range(4)]
    D = rmsd_matrix(A, B)
    ref = np.array([[aligned_rmsd(a, b) for b in B] for a in A])
    return np.abs(D - ref).max() < 1e-12, f"max deviation {np.abs(D - ref).max():.2e}"


def run_checks(selected=None, stream=None) -> list:
    """Run all (or the named) checks; exceptions count as failures."""
    results = []
    for name, fn in _REGISTRY:
        if selected and name not in selected:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if stream is not None:
            print(f"{'PASS' if res.ok else 'FAIL'}  {name:40s} {detail}  ({res.seconds:.2f}s)", file=stream, flush=True)
    return results


__all__ = ["CheckResult", "names", "run_checks"]
