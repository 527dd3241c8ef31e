"""Principal-subgraph fragment vocabulary, decomposition and fragment features."""

from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .molio import MoleculeRecord, Partition

EXHAUSTIVE_MAX_ATOMS = 8
MAX_KEY_ATOMS = 64

HYDROPHOBIC = frozenset({"C"})
HBOND = frozenset({"O", "N", "S", "P"})
NEGCENTER = frozenset({"F", "Cl", "Br", "I"})


class VocabularyExhaustedWarning(UserWarning):
    pass


@dataclass(frozen=True, order=True)
class FragmentKey:
    canonical_string: str

    @property
    def n_atoms(self) -> int:
        return int(self.canonical_string.split("|", 1)[0])

    def __str__(self):
        return self.canonical_string


# ---------------------------------------------------------------------------
# canonical labelling
# ---------------------------------------------------------------------------


def _adjacency(n, bonds):
    A = [[0] * n for _ in range(n)]
    for i, j, order in bonds:
        A[i][j] = A[j][i] = order + 1
    return A


def _rank(signatures):
    uniq = sorted(set(signatures))
    lookup = {s: r for r, s in enumerate(uniq)}
    return [lookup[s] for s in signatures]


def _refine(colors, A, nbrs):
    while True:
        sig = [(colors[v], tuple(sorted((colors[u], A[v][u]) for u in nbrs[v]))) for v in range(len(colors))]
        new = _rank(sig)
        if len(set(new)) == len(set(colors)):
            return new
        colors = new


def _exhaustive_order(elements, A, nbrs):
    """Minimum adjacency code over all orderings that respect (element, degree) classes."""
    n = len(elements)
    cls = _rank([(elements[v], len(nbrs[v])) for v in range(n)])
    slots = sorted(range(n), key=lambda v: cls[v])
    slot_class = [cls[v] for v in slots]
    best_rows: list = []
    best_order: list = []
    order: list = []
    used = [False] * n

    def dfs(pos, tight):
        nonlocal best_rows, best_order
        if pos == n:
            if tight and best_order:
                return
            best_order = list(order)
            best_rows = [tuple(A[order[p]][order[q]] for q in range(p)) for p in range(n)]
            return
        for v in range(n):
            if used[v] or cls[v] != slot_class[pos]:
                continue
            row = tuple(A[v][order[q]] for q in range(pos))
            still_tight = tight
            if tight and best_order:
                if row > best_rows[pos]:
                    continue
                if row < best_rows[pos]:
                    still_tight = False
            used[v] = True
            order.append(v)
            dfs(pos + 1, still_tight)
            order.pop()
            used[v] = False

    dfs(0, True)
    return best_order


def _ir_order(elements, A, nbrs):
    """Individualisation-refinement search for the minimum adjacency code."""
    n = len(elements)
    best = {"code": None, "order": None}

    def leaf_code(order):
        return tuple(tuple(A[order[p]][order[q]] for q in range(p)) for p in range(n))

    def search(colors):
        colors = _refine(colors, A, nbrs)
        if len(set(colors)) == n:
            order = sorted(range(n), key=lambda v: colors[v])
            code = leaf_code(order)
            if best["code"] is None or code < best["code"]:
                best["code"], best["order"] = code, order
            return
        sizes = Counter(colors)
        target = min(c for c, k in sizes.items() if k > 1)
        for v in range(n):
            if colors[v] != target:
                continue
            indiv = [2 * c for c in colors]
            indiv[v] -= 1
            search(indiv)

    search(_rank([(elements[v], len(nbrs[v])) for v in range(n)]))
    return best["order"]


def canonical_key(elements, bonds) -> FragmentKey:
    """Permutation-invariant key for a connected, atom- and bond-labelled graph.

    ``bonds`` holds ``(i, j, order)`` triples over local indices. Graphs with
    up to eight atoms are canonicalised by exhaustive search over orderings
    within (element, degree) classes; larger ones by individualisation-refinement.
    """
    elements = list(elements)
    n = len(elements)
    if n == 0:
        raise ValueError("empty subgraph")
    if n > MAX_KEY_ATOMS:
        raise ValueError(f"subgraph too large for canonical_key ({n} > {MAX_KEY_ATOMS})")
    bonds = [(int(i), int(j), int(o)) for i, j, o in bonds]
    A = _adjacency(n, bonds)
    nbrs = [[u for u in range(n) if A[v][u]] for v in range(n)]
    seen, stack = {0}, [0]
    while stack:
        u = stack.pop()
        for v in nbrs[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    if len(seen) != n:
        raise ValueError("canonical_key requires a connected subgraph")
    order = _exhaustive_order(elements, A, nbrs) if n <= EXHAUSTIVE_MAX_ATOMS else _ir_order(elements, A, nbrs)
    pos = {v: p for p, v in enumerate(order)}
    edges = sorted((min(pos[i], pos[j]), max(pos[i], pos[j]), o) for i, j, o in bonds)
    text = "%d|%s|%s" % (n, ".".join(elements[v] for v in order), ",".join("%d-%d:%d" % e for e in edges))
    return FragmentKey(text)


def subgraph_key(molecule: MoleculeRecord, atoms) -> FragmentKey:
    atoms = sorted(atoms)
    local = {a: k for k, a in enumerate(atoms)}
    bonds = [(local[b.i], local[b.j], b.order) for b in molecule.bonds if b.i in local and b.j in local]
    return canonical_key([molecule.elements[a] for a in atoms], bonds)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VocabEntry:
    key: FragmentKey
    freq: int
    rank: int


@dataclass
class FragmentVocabulary:
    entries: list = field(default_factory=list)
    exhausted: bool = False

    def __post_init__(self):
        self._index = {e.key: e for e in self.entries}

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self._index

    def get(self, key):
        return self._index.get(key)

    def add(self, key: FragmentKey, freq: int) -> VocabEntry:
        entry = VocabEntry(key, int(freq), len(self.entries))
        self.entries.append(entry)
        self._index[key] = entry
        return entry

    def prefix(self, size: int) -> "FragmentVocabulary":
        return FragmentVocabulary(list(self.entries[:size]))

    def to_json(self) -> str:
        payload = {
            "size": self.size,
            "entries": [{"key": e.key.canonical_string, "freq": e.freq, "rank": e.rank} for e in self.entries],
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FragmentVocabulary":
        data = json.loads(text)
        entries = sorted(data["entries"], key=lambda e: e["rank"])
        vocab = cls([VocabEntry(FragmentKey(e["key"]), int(e["freq"]), int(e["rank"])) for e in entries])
        if [e.rank for e in vocab.entries] != list(range(vocab.size)) or vocab.size != data["size"]:
            raise ValueError("vocabulary ranks must be dense 0..size-1")
        return vocab

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FragmentVocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


class _FragmentState:
    """Mutable fragmentation of one molecule with a per-molecule key cache."""

    def __init__(self, molecule: MoleculeRecord):
        self.mol = molecule
        self.frag_of = list(range(molecule.n_atoms))
        self.frags = {k: frozenset([k]) for k in range(molecule.n_atoms)}
        self._keys: dict = {}

    def key(self, atoms: frozenset) -> FragmentKey:
        k = self._keys.get(atoms)
        if k is None:
            k = self._keys[atoms] = subgraph_key(self.mol, atoms)
        return k

    def adjacent_pairs(self):
        pairs = set()
        for b in self.mol.bonds:
            fa, fb = self.frag_of[b.i], self.frag_of[b.j]
            if fa != fb:
                pairs.add((min(fa, fb), max(fa, fb)))
        out = []
        for fa, fb in pairs:
            union = self.frags[fa] | self.frags[fb]
            out.append((min(union), tuple(sorted(union)), fa, fb, union))
        out.sort(key=lambda p: (p[0], p[1]))
        return out

    def merge(self, fa, fb):
        union = self.frags[fa] | self.frags.pop(fb)
        self.frags[fa] = union
        for a in union:
            self.frag_of[a] = fa

    def partition(self) -> Partition:
        ordered = sorted(self.frags.values(), key=min)
        assignment = np.empty(self.mol.n_atoms, dtype=np.int64)
        for k, atoms in enumerate(ordered):
            assignment[list(atoms)] = k
        return Partition(assignment, len(ordered))


def build_vocabulary(corpus, target_size: int) -> FragmentVocabulary:
    """Grow a principal-subgraph vocabulary to ``target_size`` entries.

    Starts from every distinct single-atom key. Each round tallies the keys of
    all bond-adjacent fragment pairs over the corpus, inserts the most frequent
    key not yet present, then merges every pair carrying that key (lowest atom
    index first) in every molecule. Frequency ties go to the key whose first
    occurrence comes earliest in corpus order.
    """
    states = [_FragmentState(mol) for mol in corpus]
    atom_counts = Counter()
    for st in states:
        for a in range(st.mol.n_atoms):
            atom_counts[st.key(frozenset([a]))] += 1
    if target_size < len(atom_counts):
        raise ValueError(f"target_size {target_size} is below the {len(atom_counts)} distinct atom keys")
    vocab = FragmentVocabulary()
    for key in sorted(atom_counts):
        vocab.add(key, atom_counts[key])
    while vocab.size < target_size:
        counts = Counter()
        first_seen = {}
        for mi, st in enumerate(states):
            for lo, _, _, _, union in st.adjacent_pairs():
                key = st.key(union)
                counts[key] += 1
                first_seen.setdefault(key, (mi, lo))
        fresh = [k for k in counts if k not in vocab]
        if not fresh:
            vocab.exhausted = True
            warnings.warn(
                f"corpus exhausted at vocabulary size {vocab.size} (< {target_size})",
                VocabularyExhaustedWarning,
                stacklevel=2,
            )
            break
        new_key = min(fresh, key=lambda k: (-counts[k], first_seen[k], k))
        vocab.add(new_key, counts[new_key])
        for st in states:
            while True:
                hit = next((p for p in st.adjacent_pairs() if st.key(p[4]) == new_key), None)
                if hit is None:
                    break
                st.merge(hit[2], hit[3])
    return vocab


def decompose(molecule: MoleculeRecord, vocab: FragmentVocabulary) -> Partition:
    """Greedy merge of bond-adjacent fragments into in-vocabulary subgraphs.

    The winning merge each step has the highest vocabulary frequency, then the
    lowest vocabulary rank, then the lowest atom index.
    """
    st = _FragmentState(molecule)
    for a in range(molecule.n_atoms):
        if st.key(frozenset([a])) not in vocab:
            raise ValueError(f"atom {a} ({molecule.elements[a]}) of {molecule.id!r} is not in the vocabulary")
    while True:
        best, best_rank = None, None
        for lo, members, fa, fb, union in st.adjacent_pairs():
            entry = vocab.get(st.key(union))
            if entry is None:
                continue
            rank = (-entry.freq, entry.rank, lo, members)
            if best is None or rank < best_rank:
                best, best_rank = (fa, fb), rank
        if best is None:
            break
        st.merge(*best)
    return st.partition()


def fragment_features(molecule: MoleculeRecord, partition: Partition) -> np.ndarray:
    """Per-fragment (carbon, O/N/S/P, halogen) counts, shape (m, 3)."""
    feats = np.zeros((partition.m, 3), dtype=np.int64)
    for atom, k in zip(molecule.atoms, partition.assignment):
        el = atom.element
        if el in HYDROPHOBIC:
            feats[k, 0] += 1
        elif el in HBOND:
            feats[k, 1] += 1
        elif el in NEGCENTER:
            feats[k, 2] += 1
    return feats


def mean_fragment_size(corpus, vocab: FragmentVocabulary) -> float:
    atoms = frags = 0
    for mol in corpus:
        p = decompose(mol, vocab)
        atoms += mol.n_atoms
        frags += p.m
    return atoms / frags
