"""Approximate 3D embedding, coarse fragment structures and conformer matching.

The reference embedder stands in for a distance-geometry toolkit: target
distances come from ideal bond lengths propagated along shortest bond paths
(shrunk by 0.95 per extra hop) and are realised by weighted stress
majorisation from a seeded random start.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .fragmenting import fragment_features
from .geometry import kabsch, linear_sum_assignment, remove_mean, rmsd_matrix
from .molio import MoleculeRecord, Partition, build_mapping, ideal_bond_length

HOP_CONTRACTION = 0.95


class EmbeddingConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EmbeddingReport:
    coords: np.ndarray
    stress: float
    iterations: int
    converged: bool
    targets: np.ndarray


@dataclass(frozen=True, eq=False)
class CoarseStructure:
    frag_coords: np.ndarray
    frag_features: np.ndarray
    partition: Partition


@dataclass(frozen=True, eq=False)
class TrainingPair:
    molecule: MoleculeRecord
    x0: np.ndarray
    coarse: CoarseStructure

    @property
    def molecule_id(self) -> str:
        return self.molecule.id


def target_distances(molecule: MoleculeRecord) -> np.ndarray:
    """Shortest-path bond-length sums, contracted by 0.95**(hops - 1)."""
    n = molecule.n_atoms
    big = 1e300
    D = np.full((n, n), big)
    H = np.zeros((n, n), dtype=np.int64)
    np.fill_diagonal(D, 0.0)
    for b in molecule.bonds:
        L = ideal_bond_length(molecule.elements[b.i], molecule.elements[b.j], b.order)
        D[b.i, b.j] = D[b.j, b.i] = L
        H[b.i, b.j] = H[b.j, b.i] = 1
    for k in range(n):
        cand = np.minimum(D[:, k, None] + D[None, k, :], big)
        hops = H[:, k, None] + H[None, k, :]
        better = (cand < D - 1e-12) | ((np.abs(cand - D) <= 1e-12) & (hops < H))
        D = np.where(better, cand, D)
        H = np.where(better, hops, H)
    if np.any(D >= big):
        raise ValueError(f"molecule {molecule.id!r} is disconnected")
    scale = np.where(H > 0, HOP_CONTRACTION ** np.maximum(H - 1, 0), 1.0)
    return D * scale


def embed_with_report(molecule: MoleculeRecord, seed, max_iter: int = 500, tol: float = 1e-6) -> EmbeddingReport:
    n = molecule.n_atoms
    targets = target_distances(molecule)
    if n == 1:
        return EmbeddingReport(np.zeros((1, 3)), 0.0, 0, True, targets)
    rng = np.random.default_rng(seed)
    with np.errstate(divide="ignore"):
        W = np.where(targets > 0, 1.0 / targets**2, 0.0)
    V = np.diag(W.sum(axis=1)) - W
    Vp = np.linalg.pinv(V)
    X0 = rng.standard_normal((n, 3)) * (targets.max() / 2.0)
    X, stress, it, converged = _kernels.smacof(
        np.ascontiguousarray(targets), np.ascontiguousarray(W), np.ascontiguousarray(Vp), X0, int(max_iter), float(tol)
    )
    return EmbeddingReport(remove_mean(X), float(stress), int(it), bool(converged), targets)


def embed_reference(molecule: MoleculeRecord, seed, max_iter: int = 500, tol: float = 1e-6) -> np.ndarray:
    """Centred approximate conformer; warns (and returns the best iterate) if not converged."""
    rep = embed_with_report(molecule, seed, max_iter, tol)
    if not rep.converged:
        warnings.warn(
            f"stress majorisation did not converge for {molecule.id!r} in {rep.iterations} iterations",
            EmbeddingConvergenceWarning,
            stacklevel=2,
        )
    return rep.coords


def reference_seed(root_seed: int, molecule_id: str, index: int) -> list:
    return [int(root_seed), zlib.crc32(molecule_id.encode("utf-8")), int(index)]


def coarse_from_reference(molecule: MoleculeRecord, partition: Partition, reference) -> CoarseStructure:
    """Fragment centroids of the centred reference, plus fragment features.

    Centring the reference first makes the size-weighted mean of the centroids
    zero, so lifting them back to atoms stays on the zero centre-of-mass subspace.
    """
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != (molecule.n_atoms, 3):
        raise ValueError(f"reference shape {reference.shape} does not match {molecule.n_atoms} atoms")
    mapping = build_mapping(partition)
    frag = mapping.centroids(remove_mean(reference))
    return CoarseStructure(frag, fragment_features(molecule, partition), partition)


@dataclass(frozen=True)
class Match:
    gt_index: int
    ref_index: int
    x0: np.ndarray
    reference: np.ndarray
    rmsd: float


def match_and_align(ground_truth, references) -> list:
    """Optimal one-to-one matching of references to ground truths, then alignment.

    Each ground-truth conformer is centred and rotated onto its matched
    (centred) reference. Results come back in ground-truth order.
    """
    if len(ground_truth) != len(references):
        raise ValueError(f"{len(ground_truth)} ground truths vs {len(references)} references")
    if not ground_truth:
        return []
    cost = rmsd_matrix(references, ground_truth)
    perm = linear_sum_assignment(cost)
    ref_for_gt = np.empty_like(perm)
    ref_for_gt[perm] = np.arange(len(perm))
    out = []
    for j, gt in enumerate(ground_truth):
        i = int(ref_for_gt[j])
        ref = remove_mean(references[i])
        x = remove_mean(gt)
        if x.shape[0] >= 2:
            R = kabsch(x, ref)
            x = x @ R.T
        out.append(Match(j, i, x, ref, float(cost[i, j])))
    return out


def preprocess_molecule(molecule: MoleculeRecord, refs: str = "embed", seed: int = 0) -> MoleculeRecord:
    """Pair every ground truth with a reference and store both aligned and centred.

    ``refs="embed"`` builds one surrogate reference per ground truth;
    ``refs="file"`` uses the record's own ``reference_conformers``.
    """
    gts = list(molecule.conformers)
    if refs == "embed":
        reports = [embed_with_report(molecule, reference_seed(seed, molecule.id, k)) for k in range(len(gts))]
        stalled = sum(not r.converged for r in reports)
        if stalled:
            warnings.warn(
                f"{molecule.id!r}: {stalled}/{len(reports)} embeddings stopped at the iteration cap",
                EmbeddingConvergenceWarning,
                stacklevel=2,
            )
        references = [r.coords for r in reports]
    elif refs == "file":
        references = list(molecule.reference_conformers)
        if len(references) != len(gts):
            raise ValueError(
                f"molecule {molecule.id!r}: {len(references)} reference conformers for {len(gts)} ground truths"
            )
    else:
        raise ValueError(f"unknown reference source {refs!r}")
    matches = match_and_align(gts, references)
    return molecule.replace(
        conformers=[m.x0 for m in matches],
        reference_conformers=[m.reference for m in matches],
    )


def sampler_frame(x0, coarse: CoarseStructure) -> np.ndarray:
    """Rotate centred ``x0`` onto the lifted fragment coordinates.

    The sampler aligns every prediction onto exactly this target, so training
    in the same frame keeps blurred states identical between the two loops.
    """
    x0 = remove_mean(x0)
    target = build_mapping(coarse.partition).lift(coarse.frag_coords)
    if x0.shape[0] < 2:
        return x0
    return x0 @ kabsch(x0, target).T


def training_pairs(molecule: MoleculeRecord, partition: Partition) -> list:
    """One pair per preprocessed ground truth, coarse prior from its matched reference."""
    if len(molecule.reference_conformers) != len(molecule.conformers):
        raise ValueError(f"molecule {molecule.id!r} is not preprocessed (reference/ground-truth count mismatch)")
    out = []
    for x0, ref in zip(molecule.conformers, molecule.reference_conformers):
        coarse = coarse_from_reference(molecule, partition, ref)
        out.append(TrainingPair(molecule, sampler_frame(x0, coarse), coarse))
    return out
