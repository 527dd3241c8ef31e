"""Coverage/matching metrics for conformer ensembles and a paired signed-rank test."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import rmsd_matrix


def _heavy(conformers, elements):
    keep = np.array([e != "H" for e in elements])
    if not keep.any():
        raise ValueError("molecule has no heavy atoms")
    return [np.asarray(c)[keep] for c in conformers]


def _set_key(confs):
    return (len(confs), b"".join(np.ascontiguousarray(c, dtype=np.float64).tobytes() for c in confs))


def _pairwise(gt, gen):
    """RMSD matrix (gt x gen), always evaluated in one canonical argument order.

    Swapping the two sets then yields the exact transpose, not a 1-ulp neighbour.
    """
    if _set_key(gt) <= _set_key(gen):
        return rmsd_matrix(gt, gen)
    return rmsd_matrix(gen, gt).T


def coverage_matching(gen, gt, delta_cov: float):
    """(cov_r, mat_r, cov_p, mat_p) for generated set ``gen`` against ``gt``.

    Recall rows are ground truths (min over generated), precision rows are
    generated conformers (min over ground truths). Coverage uses ``<=``.
    """
    gen, gt = list(gen), list(gt)
    if not gen or not gt:
        raise ValueError("both conformer sets must be non-empty")
    n_gen = {np.asarray(c).shape[0] for c in gen}
    n_gt = {np.asarray(c).shape[0] for c in gt}
    if len(n_gen | n_gt) != 1:
        raise ValueError(f"atom-count mismatch between conformers: {sorted(n_gen | n_gt)}")
    D = _pairwise(gt, gen)
    rmin = D.min(axis=1)
    pmin = D.min(axis=0)
    return (
        float(np.mean(rmin <= delta_cov)),
        float(np.mean(rmin)),
        float(np.mean(pmin <= delta_cov)),
        float(np.mean(pmin)),
    )


METRICS = ("cov_r", "mat_r", "cov_p", "mat_p")


@dataclass
class EnsembleReport:
    delta_cov: float
    mol_ids: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    n_gen: list = field(default_factory=list)
    n_gt: list = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        k = METRICS.index(metric)
        return np.array([r[k] for r in self.rows], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values(metric)))

    def median(self, metric: str) -> float:
        return float(np.median(self.values(metric)))

    def summary(self) -> dict:
        out = {}
        for m in METRICS:
            out[f"{m}_mean"] = self.mean(m)
            out[f"{m}_median"] = self.median(m)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mol_id", *METRICS])
            for mid, row in zip(self.mol_ids, self.rows):
                w.writerow([mid, *(f"{v:.6f}" for v in row)])
            w.writerow(["mean", *(f"{self.mean(m):.6f}" for m in METRICS)])
            w.writerow(["median", *(f"{self.median(m):.6f}" for m in METRICS)])


def corpus_report(molecules, delta_cov: float, generated=None, heavy_only: bool = False) -> EnsembleReport:
    """Per-molecule metrics over a corpus.

    Ground truths come from ``conformers``; generated sets from
    ``generated_conformers`` unless a dict ``id -> list`` is passed.
    """
    molecules = list(molecules)
    if not molecules:
        raise ValueError("eval.corpus_report: empty corpus")
    rep = EnsembleReport(delta_cov)
    for mol in molecules:
        gen = generated[mol.id] if generated is not None else mol.generated_conformers
        gt = mol.conformers
        if not len(gt):
            raise ValueError(f"eval.corpus_report: molecule {mol.id!r} has no ground-truth conformers")
        if gen is None or not len(gen):
            raise ValueError(f"eval.corpus_report: molecule {mol.id!r} has no generated conformers")
        if heavy_only:
            gen, gt = _heavy(gen, mol.elements), _heavy(gt, mol.elements)
        rep.mol_ids.append(mol.id)
        rep.rows.append(coverage_matching(gen, gt, delta_cov))
        rep.n_gen.append(len(gen))
        rep.n_gt.append(len(gt))
    return rep


def _ranks(absd):
    """Mid-ranks (1-based) of a 1-D array."""
    order = np.argsort(absd, kind="mergesort")
    ranks = np.empty(len(absd))
    s = absd[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


EXACT_MAX_N = 12


def wilcoxon_one_sided(a, b, alternative: str = "greater", method: str = "auto") -> float:
    """P-value of the signed-rank test that ``a - b`` tends to be positive (or negative).

    Zero differences are discarded and ties receive mid-ranks. Up to 12
    non-zero pairs the null distribution is enumerated over all sign
    patterns; above that a normal approximation with continuity correction
    (and tie-corrected variance) is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    if a.size < 5:
        raise ValueError(f"need at least 5 pairs, got {a.size}")
    if alternative not in ("greater", "less"):
        raise ValueError(f"alternative must be 'greater' or 'less', got {alternative!r}")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("all differences zero")
    r = _ranks(np.abs(d))
    w_plus = float(r[d > 0].sum())
    stat = w_plus if alternative == "greater" else float(r[d < 0].sum())
    n = d.size
    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        return _exact_upper_tail(r, stat)
    mean = r.sum() / 2.0
    var = float(np.sum(r * r)) / 4.0
    z = (stat - mean - 0.5) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _exact_upper_tail(ranks, stat) -> float:
    """P(W >= stat) under random signs, by enumerating every sign pattern."""
    r = np.asarray(ranks, dtype=np.float64)
    n = r.size
    if n <= 20:
        signs = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
        sums = signs @ r
        return float(np.mean(sums >= stat - 1e-9))
    raise ValueError("exact enumeration limited to 20 pairs")
