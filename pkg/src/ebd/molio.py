"""Molecule data model, JSON-Lines I/O, atom/fragment mapping and the toy corpus."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

ELEMENTS = ("H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I")
# the atom-type table is indexed like ELEMENTS
ATOM_TYPES = ELEMENTS
BOND_ORDERS = ("single", "double", "triple", "aromatic")

COVALENT_RADII = {
    "H": 0.37, "C": 0.77, "N": 0.75, "O": 0.73, "F": 0.71,
    "P": 1.06, "S": 1.02, "Cl": 0.99, "Br": 1.14, "I": 1.33,
}
# bond-order index -> scale on the covalent-radius sum
BOND_SCALE = (1.0, 0.9, 0.85, 0.9)
VALENCE = {"H": 1, "C": 4, "N": 3, "O": 2, "F": 1, "P": 3, "S": 2, "Cl": 1, "Br": 1, "I": 1}
_BOND_VALENCE = (1.0, 2.0, 3.0, 1.5)


def ideal_bond_length(el_a: str, el_b: str, order: int = 0) -> float:
    return (COVALENT_RADII[el_a] + COVALENT_RADII[el_b]) * BOND_SCALE[order]


class MoleculeSchemaError(ValueError):
    """Molecule file or record violates the schema."""


class Atom(NamedTuple):
    element: str
    type_index: int


class Bond(NamedTuple):
    i: int
    j: int
    order: int


def _freeze(arrs) -> tuple:
    out = []
    for a in arrs:
        a = np.array(a, dtype=np.float64)
        a.setflags(write=False)
        out.append(a)
    return tuple(out)


@dataclass(frozen=True, eq=False)
class MoleculeRecord:
    id: str
    atoms: tuple
    bonds: tuple
    conformers: tuple = ()
    reference_conformers: tuple = ()
    generated_conformers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(Atom(*a) for a in self.atoms))
        object.__setattr__(self, "bonds", tuple(Bond(*b) for b in self.bonds))
        for name in ("conformers", "reference_conformers", "generated_conformers"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @cached_property
    def elements(self) -> tuple:
        return tuple(a.element for a in self.atoms)

    @cached_property
    def type_indices(self) -> np.ndarray:
        return np.array([a.type_index for a in self.atoms], dtype=np.int64)

    @cached_property
    def neighbors(self) -> tuple:
        nbrs = [[] for _ in self.atoms]
        for b in self.bonds:
            nbrs[b.i].append(b.j)
            nbrs[b.j].append(b.i)
        return tuple(tuple(sorted(x)) for x in nbrs)

    @cached_property
    def bond_lookup(self) -> dict:
        return {(min(b.i, b.j), max(b.i, b.j)): b.order for b in self.bonds}

    def hop_distances(self) -> np.ndarray:
        """All-pairs shortest-path lengths in bonds (-1 when unreachable)."""
        return hop_matrix(self.n_atoms, self.neighbors)

    def is_connected(self) -> bool:
        if self.n_atoms == 0:
            return False
        return bool(np.all(self.hop_distances()[0] >= 0))

    def replace(self, **changes) -> "MoleculeRecord":
        data = {
            "id": self.id, "atoms": self.atoms, "bonds": self.bonds,
            "conformers": self.conformers,
            "reference_conformers": self.reference_conformers,
            "generated_conformers": self.generated_conformers,
        }
        data.update(changes)
        return MoleculeRecord(**data)


def hop_matrix(n: int, neighbors: Sequence[Sequence[int]]) -> np.ndarray:
    dist = np.full((n, n), -1, dtype=np.int64)
    for s in range(n):
        dist[s, s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in neighbors[u]:
                if dist[s, v] < 0:
                    dist[s, v] = dist[s, u] + 1
                    queue.append(v)
    return dist


# ---------------------------------------------------------------------------
# JSON Lines
# ---------------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    s = format(float(x), ".9g")
    if s == "-0":
        s = "0"
    return s


def _fmt_coords(arr) -> str:
    rows = ("[" + ",".join(_fmt_float(v) for v in row) + "]" for row in arr)
    return "[" + ",".join(rows) + "]"


def _fmt_conformers(confs) -> str:
    return "[" + ",".join(_fmt_coords(c) for c in confs) + "]"


def record_to_line(rec: MoleculeRecord) -> str:
    """Canonical one-line serialisation (keys in schema order, 9 significant digits)."""
    parts = [
        '"id":' + json.dumps(rec.id, ensure_ascii=False),
        '"atoms":[' + ",".join('{"el":%s,"type":%d}' % (json.dumps(a.element), a.type_index) for a in rec.atoms) + "]",
        '"bonds":[' + ",".join("[%d,%d,%d]" % (b.i, b.j, b.order) for b in rec.bonds) + "]",
        '"conformers":' + _fmt_conformers(rec.conformers),
    ]
    if rec.reference_conformers:
        parts.append('"reference_conformers":' + _fmt_conformers(rec.reference_conformers))
    if rec.generated_conformers:
        parts.append('"generated_conformers":' + _fmt_conformers(rec.generated_conformers))
    return "{" + ",".join(parts) + "}"


def _schema(lineno, field_path, msg):
    return MoleculeSchemaError(f"line {lineno}: {field_path}: {msg}")


def _parse_conformers(value, key, n, lineno):
    if not isinstance(value, list):
        raise _schema(lineno, key, "expected an array of conformers")
    out = []
    for c, conf in enumerate(value):
        try:
            arr = np.asarray(conf, dtype=np.float64)
        except (TypeError, ValueError):
            raise _schema(lineno, f"{key}[{c}]", "expected an n x 3 numeric array") from None
        if arr.shape != (n, 3):
            raise _schema(lineno, f"{key}[{c}]", f"expected shape ({n}, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise _schema(lineno, f"{key}[{c}]", "non-finite coordinate")
        out.append(arr)
    return out


def record_from_obj(obj, lineno: int = 0) -> MoleculeRecord:
    if not isinstance(obj, dict):
        raise _schema(lineno, "<root>", "expected a JSON object")
    for key in ("id", "atoms", "bonds", "conformers"):
        if key not in obj:
            raise _schema(lineno, key, "missing required key")
    if not isinstance(obj["id"], str):
        raise _schema(lineno, "id", "expected a string")
    if not isinstance(obj["atoms"], list):
        raise _schema(lineno, "atoms", "expected an array")
    atoms = []
    for k, a in enumerate(obj["atoms"]):
        if not isinstance(a, dict) or "el" not in a or "type" not in a:
            raise _schema(lineno, f"atoms[{k}]", "expected an object with keys 'el' and 'type'")
        if a["el"] not in ELEMENTS:
            raise _schema(lineno, f"atoms[{k}].el", f"unknown element {a['el']!r}")
        t = a["type"]
        if not isinstance(t, int) or isinstance(t, bool) or not 0 <= t < len(ATOM_TYPES):
            raise _schema(lineno, f"atoms[{k}].type", f"expected an integer in [0, {len(ATOM_TYPES)})")
        atoms.append(Atom(a["el"], t))
    n = len(atoms)
    if n == 0:
        raise _schema(lineno, "atoms", "molecule has no atoms")
    if not isinstance(obj["bonds"], list):
        raise _schema(lineno, "bonds", "expected an array")
    bonds, seen = [], set()
    for k, b in enumerate(obj["bonds"]):
        if not isinstance(b, list) or len(b) != 3 or not all(isinstance(v, int) and not isinstance(v, bool) for v in b):
            raise _schema(lineno, f"bonds[{k}]", "expected [i, j, order] integers")
        i, j, order = b
        if not 0 <= i < n:
            raise _schema(lineno, f"bonds[{k}].i", f"index {i} out of range for {n} atoms")
        if not 0 <= j < n:
            raise _schema(lineno, f"bonds[{k}].j", f"index {j} out of range for {n} atoms")
        if i == j:
            raise _schema(lineno, f"bonds[{k}]", "self-bond")
        if not 0 <= order < len(BOND_ORDERS):
            raise _schema(lineno, f"bonds[{k}].order", f"expected 0..{len(BOND_ORDERS) - 1}")
        i, j = min(i, j), max(i, j)
        if (i, j) in seen:
            raise _schema(lineno, f"bonds[{k}]", f"duplicate bond ({i}, {j})")
        seen.add((i, j))
        bonds.append(Bond(i, j, order))
    confs = _parse_conformers(obj["conformers"], "conformers", n, lineno)
    refs = _parse_conformers(obj.get("reference_conformers", []), "reference_conformers", n, lineno)
    gens = _parse_conformers(obj.get("generated_conformers", []), "generated_conformers", n, lineno)
    rec = MoleculeRecord(obj["id"], atoms, bonds, confs, refs, gens)
    if not rec.is_connected():
        raise _schema(lineno, "bonds", f"bond graph of molecule {rec.id!r} is disconnected")
    return rec


def parse_molecules(path) -> list:
    """Read a JSON-Lines molecule file; blank lines are skipped."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MoleculeSchemaError(f"line {lineno}: invalid JSON: {exc.msg}") from None
            records.append(record_from_obj(obj, lineno))
    return records


def write_molecules(records, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_line(rec))
            fh.write("\n")


# ---------------------------------------------------------------------------
# partitions and the mapping matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Partition:
    """Atom -> fragment assignment with fragments numbered 0..m-1."""

    assignment: np.ndarray
    m: int

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.int64)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "m", int(self.m))

    @classmethod
    def from_assignment(cls, assignment) -> "Partition":
        a = np.asarray(assignment, dtype=np.int64)
        return cls(a, int(a.max()) + 1 if a.size else 0)

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(np.arange(n), n)

    def members(self) -> list:
        return [np.flatnonzero(self.assignment == k) for k in range(self.m)]

    def validate(self, molecule: MoleculeRecord | None = None) -> None:
        a = self.assignment
        if a.size and (a.min() < 0 or a.max() >= self.m):
            raise ValueError(f"fragment index outside 0..{self.m - 1}")
        counts = np.bincount(a, minlength=self.m)
        if np.any(counts == 0):
            raise ValueError(f"empty fragment(s): {np.flatnonzero(counts == 0).tolist()}")
        if molecule is None:
            return
        if len(a) != molecule.n_atoms:
            raise ValueError(f"partition covers {len(a)} atoms, molecule has {molecule.n_atoms}")
        for k, mem in enumerate(self.members()):
            if not _induced_connected(set(mem.tolist()), molecule.neighbors):
                raise ValueError(f"fragment {k} is not connected in the bond graph")

    def __eq__(self, other):
        return isinstance(other, Partition) and self.m == other.m and np.array_equal(self.assignment, other.assignment)

    __hash__ = None


def _induced_connected(atoms: set, neighbors) -> bool:
    if not atoms:
        return False
    start = next(iter(atoms))
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in neighbors[u]:
            if v in atoms and v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(atoms)


@dataclass(frozen=True, eq=False)
class MappingMatrix:
    """M (n x m incidence) and its left inverse M-dagger, held as the assignment array."""

    assignment: np.ndarray
    m: int
    counts: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.assignment)

    def lift(self, xf) -> np.ndarray:
        xf = np.asarray(xf, dtype=np.float64)
        if xf.ndim != 2 or xf.shape[0] != self.m:
            raise ValueError(f"expected {self.m} fragment rows, got shape {xf.shape}")
        return xf[self.assignment]

    def centroids(self, xa) -> np.ndarray:
        xa = np.asarray(xa, dtype=np.float64)
        if xa.ndim != 2 or xa.shape[0] != self.n:
            raise ValueError(f"expected {self.n} atom rows, got shape {xa.shape}")
        out = np.zeros((self.m, xa.shape[1]))
        np.add.at(out, self.assignment, xa)
        return out / self.counts[:, None]

    def project(self, xa) -> np.ndarray:
        """M M-dagger xa: every atom replaced by its fragment centroid."""
        return self.lift(self.centroids(xa))

    def dense(self) -> np.ndarray:
        M = np.zeros((self.n, self.m))
        M[np.arange(self.n), self.assignment] = 1.0
        return M

    def dense_pinv(self) -> np.ndarray:
        return self.dense().T / self.counts[:, None]


def build_mapping(partition: Partition) -> MappingMatrix:
    partition.validate()
    counts = np.bincount(partition.assignment, minlength=partition.m).astype(np.float64)
    return MappingMatrix(partition.assignment, partition.m, counts)


def lift(mapping: MappingMatrix, xf) -> np.ndarray:
    return mapping.lift(xf)


def centroids(mapping: MappingMatrix, xa) -> np.ndarray:
    return mapping.centroids(xa)


# ---------------------------------------------------------------------------
# toy corpus
# ---------------------------------------------------------------------------


@dataclass
class ToyCorpusSpec:
    count: int = 50
    min_atoms: int = 5
    max_atoms: int = 12
    conformers: int = 5
    topology_weights: dict = field(default_factory=lambda: {"chain": 1.0, "branched": 1.0, "ring": 1.0})
    element_weights: dict = field(default_factory=lambda: {"C": 0.72, "N": 0.1, "O": 0.12, "S": 0.02, "F": 0.02, "Cl": 0.02})
    ring_sizes: tuple = (5, 6)
    double_bond_prob: float = 0.1
    aromatic_prob: float = 0.5
    torsion_jitter_deg: float = 15.0
    angle_jitter_deg: float = 2.0
    add_hydrogens: bool = False
    id_prefix: str = "toy"

    @classmethod
    def from_dict(cls, data: dict) -> "ToyCorpusSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown toy-corpus keys: {sorted(unknown)}")
        data = dict(data)
        if "ring_sizes" in data:
            data["ring_sizes"] = tuple(data["ring_sizes"])
        return cls(**data)

    def validate(self) -> None:
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if not 1 <= self.min_atoms <= self.max_atoms:
            raise ValueError("need 1 <= min_atoms <= max_atoms")
        if self.conformers < 1:
            raise ValueError("conformers must be >= 1")
        w = {k: v for k, v in self.topology_weights.items() if v > 0}
        if not w or set(w) - {"chain", "branched", "ring"}:
            raise ValueError(f"bad topology_weights {self.topology_weights}")
        if "ring" in w:
            if not self.ring_sizes or min(self.ring_sizes) < 3:
                raise ValueError("ring sizes must be >= 3")
            if min(self.ring_sizes) > self.max_atoms:
                raise ValueError("smallest ring does not fit in max_atoms")
        ew = {k: v for k, v in self.element_weights.items() if v > 0}
        if not ew or set(ew) - set(ELEMENTS):
            raise ValueError(f"bad element_weights {self.element_weights}")
        if "C" not in ew and "N" not in ew:
            raise ValueError("element_weights need a branching element (C or N)")


def _pick(rng, weights: dict):
    keys = sorted(weights)
    p = np.array([weights[k] for k in keys], dtype=np.float64)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def _toy_topology(rng, spec: ToyCorpusSpec):
    """Returns (n, bonds as {(i,j): order}, ring atom list)."""
    topo = _pick(rng, {k: v for k, v in spec.topology_weights.items() if v > 0})
    sizes = [r for r in spec.ring_sizes if r <= spec.max_atoms]
    lo = max(spec.min_atoms, min(sizes)) if topo == "ring" else spec.min_atoms
    n = int(rng.integers(lo, spec.max_atoms + 1))
    bonds, ring = {}, []
    if topo == "chain":
        for i in range(n - 1):
            bonds[(i, i + 1)] = 0
        return n, bonds, ring
    start = 1
    if topo == "ring":
        k = int(rng.choice([r for r in sizes if r <= n]))
        ring = list(range(k))
        for i in range(k):
            a, b = i, (i + 1) % k
            bonds[(min(a, b), max(a, b))] = 0
        start = k
    degree = np.zeros(n, dtype=np.int64)
    for i, j in bonds:
        degree[i] += 1
        degree[j] += 1
    for new in range(start, n):
        cand = [a for a in range(new) if degree[a] < 3]
        parent = int(rng.choice(cand))
        bonds[(parent, new)] = 0
        degree[parent] += 1
        degree[new] += 1
    return n, bonds, ring


def _assign_chemistry(rng, spec, n, bonds, ring):
    degree = np.zeros(n, dtype=np.int64)
    for i, j in bonds:
        degree[i] += 1
        degree[j] += 1
    aromatic = len(ring) == 6 and rng.random() < spec.aromatic_prob and all(degree[a] <= 3 for a in ring)
    ew = {k: v for k, v in spec.element_weights.items() if v > 0}
    elements = []
    for a in range(n):
        if aromatic and a in ring:
            elements.append("C" if "C" in ew else "N")
            continue
        allowed = {e: w for e, w in ew.items() if VALENCE[e] >= degree[a]}
        if not allowed:
            allowed = {"C": 1.0}
        elements.append(_pick(rng, allowed))
    if aromatic:
        for i in range(len(ring)):
            a, b = ring[i], ring[(i + 1) % len(ring)]
            bonds[(min(a, b), max(a, b))] = 3
    used = np.zeros(n)
    for (i, j), o in bonds.items():
        used[i] += _BOND_VALENCE[o]
        used[j] += _BOND_VALENCE[o]
    ring_set = set(ring)
    for (i, j) in sorted(bonds):
        if bonds[(i, j)] != 0 or (i in ring_set and j in ring_set):
            continue
        if rng.random() >= spec.double_bond_prob:
            continue
        if used[i] + 1 <= VALENCE[elements[i]] and used[j] + 1 <= VALENCE[elements[j]]:
            bonds[(i, j)] = 1
            used[i] += 1
            used[j] += 1
    return elements, bonds, aromatic


def _unit(v):
    return v / np.linalg.norm(v)


def _nerf(a, b, c, length, angle, torsion):
    """Place d bonded to c with angle b-c-d and torsion a-b-c-d (radians)."""
    bc = _unit(c - b)
    nrm = _unit(np.cross(b - a, bc))
    m = np.stack([bc, np.cross(nrm, bc), nrm], axis=1)
    d2 = np.array([
        -length * math.cos(angle),
        length * math.sin(angle) * math.cos(torsion),
        length * math.sin(angle) * math.sin(torsion),
    ])
    return c + m @ d2


def _spread_directions(fixed, k, iters=200):
    """k unit vectors spread away from each other and from the fixed unit vectors."""
    template = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]) / math.sqrt(3)
    if len(fixed):
        # rotate the template so its spare vertex points at the first fixed bond
        target = fixed[0]
        src = -template[3] if len(fixed) else template[3]
        axis = np.cross(src, target)
        s, c = np.linalg.norm(axis), float(src @ target)
        if s > 1e-12:
            K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
            R = np.eye(3) + K + K @ K / (1 + c)
        else:
            R = np.eye(3) if c > 0 else -np.eye(3)
        template = template @ R.T
    free = [t for t in template if all(t @ f < 0.9 for f in fixed)][:k]
    while len(free) < k:
        free.append(template[len(free) % 4] * -1.0)
    pts = np.array(free, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64).reshape(-1, 3)
    for _ in range(iters):
        allp = np.vstack([fixed, pts])
        force = np.zeros_like(pts)
        for i in range(k):
            diff = pts[i] - allp
            d2 = np.einsum("ij,ij->i", diff, diff)
            d2[len(fixed) + i] = np.inf
            force[i] = np.sum(diff / d2[:, None] ** 1.5, axis=0)
        pts = pts + 0.05 * force
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return pts


def _toy_geometry(rng, spec, n, elements, bonds, ring, aromatic):
    nbrs = [[] for _ in range(n)]
    for i, j in sorted(bonds):
        nbrs[i].append(j)
        nbrs[j].append(i)
    sp2 = np.zeros(n, dtype=bool)
    for (i, j), o in bonds.items():
        if o in (1, 3):
            sp2[i] = sp2[j] = True
    ring_set = set(ring)
    jit_t = math.radians(spec.torsion_jitter_deg)
    jit_a = math.radians(spec.angle_jitter_deg)
    X = np.zeros((n, 3))
    placed = np.zeros(n, dtype=bool)
    parent = np.full(n, -1)
    virtual = np.array([-1.0, 0.0, 0.0])

    def ring_nbrs(a):
        return [b for b in nbrs[a] if b in ring_set]

    def anchor(b):
        """(torsion reference, angle reference) points for children of b."""
        p = parent[b]
        if p >= 0:
            if parent[p] >= 0:
                return X[parent[p]], X[p]
            if p in ring_set:
                return X[ring_nbrs(p)[0]], X[p]
            return virtual, X[p]
        if b in ring_set:
            rn = ring_nbrs(b)
            return X[rn[0]], 0.5 * (X[rn[0]] + X[rn[1]])
        return np.array([-1.5, 1.0, 0.0]), virtual

    if ring:
        k = len(ring)
        L = np.mean([ideal_bond_length(elements[ring[i]], elements[ring[(i + 1) % k]],
                                       bonds[tuple(sorted((ring[i], ring[(i + 1) % k])))]) for i in range(k)])
        radius = L / (2 * math.sin(math.pi / k))
        amp = 0.0 if aromatic else rng.uniform(0.1, 0.35)
        phase = rng.uniform(0, 2 * math.pi)
        for idx, a in enumerate(ring):
            th = 2 * math.pi * idx / k
            z = amp * math.cos(2 * th + phase) + rng.normal(0, 0.02)
            X[a] = (radius * math.cos(th), radius * math.sin(th), z)
            placed[a] = True
        queue = deque(ring)
    else:
        root = next((a for a in range(n) if len(nbrs[a]) <= 1), 0)
        placed[root] = True
        queue = deque([root])
    while queue:
        b = queue.popleft()
        children = [c for c in nbrs[b] if not placed[c]]
        if not children:
            continue
        ref_pos, a_pos = anchor(b)
        if b in ring_set:
            angle = math.radians(175.0 if len(children) == 1 else 125.0)
            base, step = (180.0, 180.0) if len(children) == 1 else (90.0, 180.0)
        elif sp2[b]:
            angle = math.radians(120.0)
            base, step = float(rng.choice([0.0, 180.0])), 180.0
        else:
            angle = math.radians(109.47)
            base, step = float(rng.choice([60.0, 180.0, 300.0])), 120.0
        for ci, c in enumerate(children):
            tors = math.radians(base + step * ci) + rng.normal(0, jit_t)
            ang = angle + rng.normal(0, jit_a)
            length = ideal_bond_length(elements[b], elements[c], bonds[(min(b, c), max(b, c))])
            X[c] = _nerf(ref_pos, a_pos, X[b], length, ang, tors)
            placed[c] = True
            parent[c] = b
            queue.append(c)
    return X


def _clashes(X, hops, min_dist=1.1):
    n = len(X)
    if n < 4:
        return False
    d = np.linalg.norm(X[:, None] - X[None], axis=-1)
    far = hops >= 3
    return bool(np.any(d[far] < min_dist))


def _add_hydrogens(elements, bonds, confs):
    n = len(elements)
    used = np.zeros(n)
    nbrs = [[] for _ in range(n)]
    for (i, j), o in sorted(bonds.items()):
        used[i] += _BOND_VALENCE[o]
        used[j] += _BOND_VALENCE[o]
        nbrs[i].append(j)
        nbrs[j].append(i)
    n_h = [max(0, int(round(VALENCE[e] - u))) for e, u in zip(elements, used)]
    new_el = list(elements)
    new_bonds = dict(bonds)
    owners = []
    for a in range(n):
        for _ in range(n_h[a]):
            new_bonds[(a, len(new_el))] = 0
            owners.append(a)
            new_el.append("H")
    out = []
    for X in confs:
        H = []
        for a in range(n):
            if n_h[a] == 0:
                continue
            fixed = [_unit(X[b] - X[a]) for b in nbrs[a]]
            dirs = _spread_directions(fixed, n_h[a])
            L = ideal_bond_length(elements[a], "H")
            H.extend(X[a] + L * d for d in dirs)
        out.append(np.vstack([X, np.array(H).reshape(-1, 3)]))
    return new_el, new_bonds, out


def generate_toy_corpus(spec: ToyCorpusSpec, seed: int) -> list:
    """Procedural molecules with ideal bond lengths and seeded torsional variety."""
    spec.validate()
    records = []
    for idx in range(spec.count):
        rng = np.random.default_rng([int(seed), idx])
        n, bonds, ring = _toy_topology(rng, spec)
        elements, bonds, aromatic = _assign_chemistry(rng, spec, n, bonds, ring)
        nbrs = [[] for _ in range(n)]
        for i, j in bonds:
            nbrs[i].append(j)
            nbrs[j].append(i)
        hops = hop_matrix(n, nbrs)
        confs = []
        for _ in range(spec.conformers):
            for _attempt in range(50):
                X = _toy_geometry(rng, spec, n, elements, bonds, ring, aromatic)
                if not _clashes(X, hops):
                    break
            confs.append(X - X.mean(axis=0))
        if spec.add_hydrogens:
            elements, bonds, confs = _add_hydrogens(elements, bonds, confs)
            confs = [c - c.mean(axis=0) for c in confs]
        atoms = [Atom(e, ELEMENTS.index(e)) for e in elements]
        blist = [Bond(i, j, o) for (i, j), o in sorted(bonds.items())]
        records.append(MoleculeRecord(f"{spec.id_prefix}{idx:04d}", atoms, blist, confs))
    return records
