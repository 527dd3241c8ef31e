"""SE(3)-equivariant hierarchical deblurring network.

Two coupled message-passing levels share each layer. A complete graph links
fragments; an expanded graph (bonds, multi-hop pairs and radius neighbours)
links atoms. Atom coordinates are updated by distance-normalised relative
vectors, plus a pull toward the atom's own fragment centroid. Several
molecules (or several copies of one) are evaluated together as a disjoint
union of graphs.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tensor
from .fragmenting import fragment_features
from .molio import ELEMENTS, BOND_ORDERS, MoleculeRecord, Partition

DIST_EPS = 1e-12
CKPT_MAGIC = b"EBDCKPT\x00"
CKPT_VERSION = 1


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    layers: int = 6
    width: int = 128
    hops: int = 3
    cutoff: float = 10.0
    atom_types: int = len(ELEMENTS)
    time_dim: int = 16
    frozen_frag_coords: bool = False

    def __post_init__(self):
        if self.layers < 1 or self.width < 1 or self.hops < 1:
            raise ValueError(f"layers, width and hops must be >= 1 (got {self.layers}, {self.width}, {self.hops})")
        if not self.cutoff > 0:
            raise ValueError(f"cutoff must be positive, got {self.cutoff}")
        if self.atom_types < 1:
            raise ValueError("atom_types must be >= 1")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError(f"time_dim must be an even number >= 2, got {self.time_dim}")

    @property
    def bond_types(self) -> int:
        """Bond orders, hop distances 2..hops, and the radius/virtual category."""
        return len(BOND_ORDERS) + (self.hops - 1) + 1

    @property
    def radius_type(self) -> int:
        return self.bond_types - 1

    def hop_type(self, k: int) -> int:
        return len(BOND_ORDERS) + (k - 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# name -> (input width, output width) of each per-layer perceptron
def _mlp_specs(cfg: NetworkConfig):
    d = cfg.width
    return {
        "phi_m_f": (2 * d + 1, d),
        "phi_h_f": (3 * d, d),
        "phi_m_a": (3 * d + 1, d),
        "phi_h_a": (3 * d, d),
        "phi_x_a": (4 * d, 1),
        "phi_x_f": (2 * d + 1, 1),
    }


def parameter_shapes(cfg: NetworkConfig) -> dict:
    d = cfg.width
    shapes = {
        "embed.atom": (cfg.atom_types, d),
        "embed.edge": (cfg.bond_types, d),
        "embed.frag.W": (3, d),
        "embed.frag.b": (d,),
        "embed.time_a.W": (cfg.time_dim, d),
        "embed.time_a.b": (d,),
        "embed.time_f.W": (cfg.time_dim, d),
        "embed.time_f.b": (d,),
    }
    for l in range(cfg.layers):
        for name, (fin, fout) in _mlp_specs(cfg).items():
            dims = (fin, d, d, fout)
            for k in range(3):
                shapes[f"layers.{l}.{name}.{k}.W"] = (dims[k], dims[k + 1])
                shapes[f"layers.{l}.{name}.{k}.b"] = (dims[k + 1],)
    return shapes


def init_params(cfg: NetworkConfig, seed) -> dict:
    """Uniform(+-sqrt(1/fan_in)) weights; coordinate-head output layers start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if ".phi_x_" in name and ".2." in name:
            params[name] = np.zeros(shape)
            continue
        if name.startswith("embed.atom") or name.startswith("embed.edge"):
            fan_in = shape[0]
        elif name.endswith(".b"):
            fan_in = parameter_shapes(cfg)[name[:-1] + "W"][0]
        else:
            fan_in = shape[0]
        bound = np.sqrt(1.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def count_parameters(params: dict) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


def time_embedding(t_norm, time_dim: int) -> np.ndarray:
    """Sinusoidal features of t in [0, 1] with geometric frequencies 1..1e4."""
    t = np.atleast_1d(np.asarray(t_norm, dtype=np.float64))
    freqs = np.geomspace(1.0, 1e4, time_dim // 2)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class EdgeSet:
    i: np.ndarray
    j: np.ndarray
    types: np.ndarray

    def __len__(self):
        return int(self.i.shape[0])

    def pairs(self) -> dict:
        return {(int(a), int(b)): int(t) for a, b, t in zip(self.i, self.j, self.types)}


def _structural_types(molecule: MoleculeRecord, cfg: NetworkConfig) -> np.ndarray:
    """n x n type table for bonded and hop pairs; -1 where only the radius can link."""
    n = molecule.n_atoms
    types = np.full((n, n), -1, dtype=np.int64)
    hops = molecule.hop_distances()
    for k in range(2, cfg.hops + 1):
        types[hops == k] = cfg.hop_type(k)
    for b in molecule.bonds:
        types[b.i, b.j] = types[b.j, b.i] = b.order
    np.fill_diagonal(types, -1)
    return types


def expand_edges(molecule: MoleculeRecord, coords, cfg: NetworkConfig) -> EdgeSet:
    """Bonded, hop-k (2..hops) and within-cutoff pairs, both directions, bond > hop > radius."""
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValueError("coordinates contain non-finite values")
    types = _structural_types(molecule, cfg)
    n = molecule.n_atoms
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    radius = (dist < cfg.cutoff) & ~np.eye(n, dtype=bool)
    types = np.where((types < 0) & radius, cfg.radius_type, types)
    i, j = np.nonzero(types >= 0)
    return EdgeSet(i, j, types[i, j])


class GraphBatch:
    """Index bookkeeping for a disjoint union of molecular graphs."""

    def __init__(self, molecules, partitions, cfg: NetworkConfig, frag_features=None):
        if len(molecules) != len(partitions) or not molecules:
            raise ValueError("need one partition per molecule and at least one molecule")
        self.cfg = cfg
        self.n_graphs = len(molecules)
        types, frag_of_atom, graph_of_atom, graph_of_frag = [], [], [], []
        feats, ci, cj, ctype, fi, fj = [], [], [], [], [], []
        n_off = m_off = 0
        for g, (mol, part) in enumerate(zip(molecules, partitions)):
            n, m = mol.n_atoms, part.m
            if len(part.assignment) != n:
                raise ValueError(f"partition size {len(part.assignment)} != {n} atoms for {mol.id!r}")
            ti = mol.type_indices
            if ti.size and ti.max() >= cfg.atom_types:
                raise ValueError(f"atom type {int(ti.max())} outside embedding table of {cfg.atom_types}")
            types.append(ti)
            frag_of_atom.append(np.asarray(part.assignment) + m_off)
            graph_of_atom.append(np.full(n, g))
            graph_of_frag.append(np.full(m, g))
            f = fragment_features(mol, part) if frag_features is None else frag_features[g]
            feats.append(np.asarray(f, dtype=np.float64).reshape(m, 3))
            st = _structural_types(mol, cfg)
            a, b = np.nonzero(~np.eye(n, dtype=bool))
            ci.append(a + n_off)
            cj.append(b + n_off)
            ctype.append(st[a, b])
            a, b = np.nonzero(~np.eye(m, dtype=bool))
            fi.append(a + m_off)
            fj.append(b + m_off)
            n_off += n
            m_off += m
        self.n_atoms, self.n_frags = n_off, m_off
        cat = lambda xs: np.concatenate(xs).astype(np.int64)  # noqa: E731
        self.atom_types = cat(types)
        self.frag_features = np.concatenate(feats)
        self.frag_of_atom = Segments(cat(frag_of_atom), m_off)
        self.graph_of_atom = Segments(cat(graph_of_atom), self.n_graphs)
        self.graph_of_frag = Segments(cat(graph_of_frag), self.n_graphs)
        self.atom_type_idx = Segments(self.atom_types, cfg.atom_types)
        self.frag_counts = np.bincount(self.frag_of_atom.index, minlength=m_off).astype(np.float64)[:, None]
        self.atom_counts = np.bincount(self.graph_of_atom.index, minlength=self.n_graphs).astype(np.float64)[:, None]
        self.cand_i, self.cand_j, self.cand_type = cat(ci), cat(cj), cat(ctype)
        self.frag_i = Segments(cat(fi), m_off)
        self.frag_j = Segments(cat(fj), m_off)
        self._full_edges = None

    def edges(self, x: np.ndarray):
        """Receiver/sender index objects and edge types at the current coordinates."""
        cfg = self.cfg
        d = x[self.cand_i] - x[self.cand_j]
        near = np.einsum("ij,ij->i", d, d) < cfg.cutoff * cfg.cutoff
        keep = (self.cand_type >= 0) | near
        if keep.all():
            if self._full_edges is None:
                t = np.where(self.cand_type >= 0, self.cand_type, cfg.radius_type)
                self._full_edges = self._pack(self.cand_i, self.cand_j, t)
            return self._full_edges
        t = np.where(self.cand_type >= 0, self.cand_type, cfg.radius_type)[keep]
        return self._pack(self.cand_i[keep], self.cand_j[keep], t)

    def _pack(self, i, j, t):
        return Segments(i, self.n_atoms), Segments(j, self.n_atoms), Segments(t, self.cfg.bond_types)


def _linear(x, W, b):
    return ad.add(ad.matmul(x, W), b)


def _mlp(p, prefix, parts):
    """Two SiLU hidden layers. ``parts`` is a list of (tensor, gather-index or None).

    The first layer is applied per part before gathering, which equals a
    linear layer on the concatenated edge inputs but costs node-count rows.
    """
    W0 = p[prefix + ".0.W"]
    h = None
    lo = 0
    for x, idx in parts:
        w = x.shape[1]
        y = ad.matmul(x, ad.getitem(W0, slice(lo, lo + w)))
        if idx is not None:
            y = ad.take(y, idx)
        h = y if h is None else ad.add(h, y)
        lo += w
    if lo != W0.shape[0]:
        raise ValueError(f"{prefix}: input width {lo} != {W0.shape[0]}")
    h = ad.silu(ad.add(h, p[prefix + ".0.b"]))
    h = ad.silu(_linear(h, p[prefix + ".1.W"], p[prefix + ".1.b"]))
    return _linear(h, p[prefix + ".2.W"], p[prefix + ".2.b"])


def _norm(v):
    return ad.sqrt(ad.add(ad.tsum(ad.square(v), axis=1, keepdims=True), DIST_EPS))


def _check_finite(t, layer, what):
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"net.forward: non-finite {what} at layer {layer}")


def forward_batch(params, cfg: NetworkConfig, batch: GraphBatch, x, t_norm, return_features: bool = False):
    """Predict clean coordinates for every graph of ``batch``.

    ``params`` values may be arrays or ``Tensor`` leaves; ``x`` is the stacked
    (centred) atom coordinates, ``t_norm`` one value per graph in [0, 1].
    Returns a ``Tensor`` (and the per-layer features when requested).
    """
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    x = ad.as_tensor(x)
    if x.shape != (batch.n_atoms, 3):
        raise ValueError(f"x has shape {x.shape}, batch expects ({batch.n_atoms}, 3)")
    t_norm = np.broadcast_to(np.asarray(t_norm, dtype=np.float64), (batch.n_graphs,))
    temb = Tensor(time_embedding(t_norm, cfg.time_dim))
    foa = batch.frag_of_atom
    inv_counts = Tensor(1.0 / batch.frag_counts)

    ta = _linear(temb, p["embed.time_a.W"], p["embed.time_a.b"])
    tf = _linear(temb, p["embed.time_f.W"], p["embed.time_f.b"])
    ha = ad.add(ad.take(p["embed.atom"], batch.atom_type_idx), ad.take(ta, batch.graph_of_atom))
    hf = ad.add(_linear(Tensor(batch.frag_features), p["embed.frag.W"], p["embed.frag.b"]), ad.take(tf, batch.graph_of_frag))

    features = {"h_a": [ha.data], "h_f": [hf.data]}
    xf_frozen = ad.mul(ad.segment_sum(x, foa), inv_counts) if cfg.frozen_frag_coords else None
    for l in range(cfg.layers):
        pre = f"layers.{l}."
        xf = xf_frozen if xf_frozen is not None else ad.mul(ad.segment_sum(x, foa), inv_counts)

        # fragment level, complete graph
        df = ad.sub(ad.take(xf, batch.frag_i), ad.take(xf, batch.frag_j))
        mf = _mlp(p, pre + "phi_m_f", [(hf, batch.frag_i), (hf, batch.frag_j), (_norm(df), None)])
        agg_f = ad.segment_sum(mf, batch.frag_i)
        pooled = ad.mul(ad.segment_sum(ha, foa), inv_counts)
        hf_new = ad.add(hf, _mlp(p, pre + "phi_h_f", [(hf, None), (agg_f, None), (pooled, None)]))

        # atom level, expanded graph
        ei, ej, et = batch.edges(x.data)
        e = ad.take(p["embed.edge"], et)
        dx = ad.sub(ad.take(x, ei), ad.take(x, ej))
        dist = _norm(dx)
        ma = _mlp(p, pre + "phi_m_a", [(ha, ei), (ha, ej), (dist, None), (e, None)])
        agg_a = ad.segment_sum(ma, ei)
        hf_of_atom = ad.take(hf_new, foa)
        ha_new = ad.add(ha, _mlp(p, pre + "phi_h_a", [(ha, None), (agg_a, None), (hf_of_atom, None)]))

        # coordinates
        wa = _mlp(p, pre + "phi_x_a", [(ha_new, ei), (ha_new, ej), (ma, None), (e, None)])
        rel = ad.segment_sum(ad.mul(ad.div(dx, ad.add(dist, 1.0)), wa), ei)
        da = ad.sub(x, ad.take(xf, foa))
        na = _norm(da)
        wf = _mlp(p, pre + "phi_x_f", [(ha_new, None), (hf_of_atom, None), (na, None)])
        x = ad.add(ad.add(x, rel), ad.mul(ad.div(da, ad.add(na, 1.0)), wf))

        ha, hf = ha_new, hf_new
        _check_finite(ha, l, "atom features")
        _check_finite(hf, l, "fragment features")
        _check_finite(x, l, "coordinates")
        features["h_a"].append(ha.data)
        features["h_f"].append(hf.data)

    com = ad.div(ad.segment_sum(x, batch.graph_of_atom), batch.atom_counts)
    out = ad.sub(x, ad.take(com, batch.graph_of_atom))
    if return_features:
        return out, features
    return out


def forward(params, cfg: NetworkConfig, molecule: MoleculeRecord, partition: Partition, x_t, t_norm, return_features=False):
    """Single-molecule prediction as a plain array (features dict optional)."""
    batch = GraphBatch([molecule], [partition], cfg)
    res = forward_batch(params, cfg, batch, np.asarray(x_t, dtype=np.float64), [t_norm], return_features)
    if return_features:
        return res[0].data, res[1]
    return res.data


def gradient(params: dict, loss_closure):
    """Reverse-mode gradient of a scalar closure over parameter leaves: (loss, grads)."""
    return ad.gradient(params, loss_closure)


# checkpoint container: magic, version u32, header length u64, JSON header, raw <f8 arrays


def save_checkpoint(path, arrays: dict, header: dict) -> None:
    index, offset = [], 0
    blobs = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    head = json.dumps({**header, "arrays": index}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(head)))
    buf.write(head)
    for b in blobs:
        buf.write(b)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple:
    """Returns (arrays, header)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    arrays = {}
    for ent in header.pop("arrays"):
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = pos + ent["offset"]
        arrays[ent["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape).copy()
    return arrays, header
