"""Training (aligned ground-truth-estimation loss, AdamW) and reverse sampling."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import net
from .autodiff import Tensor
from .coarse import CoarseStructure, TrainingPair
from .diffusion import DiffusionSchedule, blur, centered_noise, forward_sample
from .geometry import kabsch, remove_mean
from .molio import build_mapping
from .net import GraphBatch, NetworkConfig, NumericalError


class ConfigError(ValueError):
    pass


class ResumeMismatchError(ConfigError):
    pass


class NonFiniteLossError(NumericalError):
    def __init__(self, msg, molecule_ids=()):
        super().__init__(msg)
        self.molecule_ids = tuple(molecule_ids)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    steps: int = 2000

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0 and eps > 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_rotation(pred, target):
    if pred.shape[0] < 2:
        return np.eye(3)
    return kabsch(pred, target)


def loss(x0, prediction):
    """Mean squared residual between ``x0`` and the prediction rotated onto it.

    The rotation is computed from values and held constant, so gradients do
    not flow through the alignment. Returns a float for array input and a
    scalar ``Tensor`` when ``prediction`` is a tracked tensor.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    pdata = prediction.data if isinstance(prediction, Tensor) else np.asarray(prediction, dtype=np.float64)
    if x0.shape != pdata.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {pdata.shape}")
    R = _safe_rotation(pdata, x0)
    if isinstance(prediction, Tensor):
        return ad.mean(ad.square(ad.sub(x0, ad.matmul(prediction, R.T))))
    return float(np.mean((x0 - pdata @ R.T) ** 2))


def batch_loss(x0, prediction: Tensor, batch: GraphBatch):
    """Average over graphs of each graph's aligned mean squared residual."""
    gidx = batch.graph_of_atom.index
    pdata = prediction.data
    Ratom = np.empty((batch.n_atoms, 3, 3))
    for g in range(batch.n_graphs):
        rows = gidx == g
        Ratom[rows] = _safe_rotation(pdata[rows], x0[rows])
    rot = None
    for c in range(3):
        term = ad.mul(ad.getitem(prediction, (slice(None), slice(c, c + 1))), Ratom[:, :, c])
        rot = term if rot is None else ad.add(rot, term)
    w = 1.0 / (3.0 * batch.atom_counts[gidx] * batch.n_graphs)
    return ad.tsum(ad.mul(ad.square(ad.sub(x0, rot)), w))


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int
    rng: np.random.Generator
    config: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: dict, seed, config: dict | None = None) -> "TrainState":
        zeros = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(
            params={k: np.array(v, dtype=np.float64) for k, v in params.items()},
            m=zeros,
            v={k: np.zeros_like(v) for k, v in params.items()},
            step=0,
            rng=np.random.default_rng(seed),
            config=dict(config or {}),
        )


def adamw_update(state: TrainState, grads: dict, opt: OptimizerConfig) -> None:
    """In-place bias-corrected adaptive-moment step with decoupled weight decay."""
    state.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + opt.eps) + opt.weight_decay * state.params[k]
        state.params[k] = state.params[k] - opt.lr * upd


class _BatchCache:
    def __init__(self, cfg):
        self.cfg = cfg
        self._cache = {}

    def get(self, pairs):
        key = tuple(id(p) for p in pairs)
        b = self._cache.get(key)
        if b is None:
            b = GraphBatch(
                [p.molecule for p in pairs],
                [p.coarse.partition for p in pairs],
                self.cfg,
                frag_features=[p.coarse.frag_features for p in pairs],
            )
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = b
        return b


def train_step(state: TrainState, pairs, schedule: DiffusionSchedule, net_cfg: NetworkConfig,
               opt: OptimizerConfig, cache: _BatchCache | None = None):
    """One optimiser step on a mini-batch of training pairs; returns (state, loss)."""
    if isinstance(pairs, TrainingPair):
        pairs = [pairs]
    rng = state.rng
    ts = rng.integers(1, schedule.T + 1, size=len(pairs))
    xs, x0s = [], []
    for p, t in zip(pairs, ts):
        mapping = build_mapping(p.coarse.partition)
        xs.append(forward_sample(p.x0, p.coarse, mapping, int(t), schedule, rng))
        x0s.append(p.x0)
    batch = (cache or _BatchCache(net_cfg)).get(pairs)
    x_t = np.concatenate(xs)
    x0 = np.concatenate(x0s)
    t_norm = ts / schedule.T

    def closure(q):
        pred = net.forward_batch(q, net_cfg, batch, x_t, t_norm)
        return batch_loss(x0, pred, batch)

    value, grads = ad.gradient(state.params, closure)
    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        ids = [p.molecule_id for p in pairs]
        raise NonFiniteLossError(f"engine.train_step: non-finite loss at step {state.step + 1} for {ids}", ids)
    adamw_update(state, grads, opt)
    return state, value


def _rng_state_json(rng):
    return rng.bit_generator.state


def _restore_rng(st):
    bg = getattr(np.random, st["bit_generator"])()
    bg.state = st
    return np.random.Generator(bg)


def run_signature(net_cfg: NetworkConfig, opt: OptimizerConfig, schedule: DiffusionSchedule) -> dict:
    """Everything that must match between a checkpoint and the run resuming it."""
    opt_d = opt.to_dict()
    opt_d.pop("steps")
    return {"net": net_cfg.to_dict(), "opt": opt_d, "schedule": asdict(schedule)}


def save_state(path, state: TrainState, extra_header: dict | None = None) -> None:
    arrays = {f"param.{k}": v for k, v in state.params.items()}
    arrays.update({f"adam.m.{k}": v for k, v in state.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in state.v.items()})
    header = {
        "step": state.step,
        "rng": _rng_state_json(state.rng),
        "config": state.config,
        "flagged": state.flagged,
    }
    header.update(extra_header or {})
    tmp = f"{path}.tmp"
    net.save_checkpoint(tmp, arrays, header)
    os.replace(tmp, path)


def load_state(path) -> tuple:
    """Returns (TrainState, header)."""
    arrays, header = net.load_checkpoint(path)
    pick = lambda pre: {k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)}  # noqa: E731
    params = pick("param.")
    m = pick("adam.m.") or {k: np.zeros_like(v) for k, v in params.items()}
    v = pick("adam.v.") or {k: np.zeros_like(v) for k, v in params.items()}
    rng = _restore_rng(header["rng"]) if "rng" in header else np.random.default_rng(0)
    state = TrainState(params, m, v, int(header.get("step", 0)), rng, header.get("config", {}), header.get("flagged", []))
    return state, header


def train(pairs, net_cfg: NetworkConfig, opt: OptimizerConfig, schedule: DiffusionSchedule, seed,
          ckpt_dir=None, ckpt_every: int = 0, log_path=None, resume=None, extra_header=None,
          init_seed=None, progress=None) -> TrainState:
    """Run ``opt.steps`` optimiser steps over ``pairs``.

    Batches draw ``batch_size`` distinct pairs per step (all pairs if fewer).
    The CSV log has columns ``step,loss,seconds``. With ``resume`` the run
    continues from a checkpoint whose configuration must match exactly.
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("engine.train: empty training corpus")
    signature = run_signature(net_cfg, opt, schedule)
    if resume is not None:
        state, header = load_state(resume)
        if state.config != json.loads(json.dumps(signature)):
            raise ResumeMismatchError(f"engine.train: checkpoint {resume} was written with a different configuration")
    else:
        params = net.init_params(net_cfg, seed if init_seed is None else init_seed)
        rng = np.random.SeedSequence(seed)
        state = TrainState.fresh(params, rng.spawn(1)[0], signature)
    cache = _BatchCache(net_cfg)
    log_fh = None
    if log_path is not None:
        new = resume is None or not os.path.exists(log_path)
        log_fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(log_fh)
        if new:
            writer.writerow(["step", "loss", "seconds"])
    t0 = time.perf_counter()
    bs = min(opt.batch_size, len(pairs))
    try:
        while state.step < opt.steps:
            idx = state.rng.choice(len(pairs), size=bs, replace=False)
            chosen = [pairs[i] for i in np.sort(idx)]
            try:
                state, value = train_step(state, chosen, schedule, net_cfg, opt, cache)
            except NonFiniteLossError as exc:
                state.flagged.append({"step": state.step + 1, "molecules": list(exc.molecule_ids)})
                state.step += 1
                value = float("nan")
            if log_fh is not None:
                writer.writerow([state.step, repr(float(value)), f"{time.perf_counter() - t0:.3f}"])
            if progress is not None:
                progress(state.step, value)
            if ckpt_dir is not None and ckpt_every and state.step % ckpt_every == 0:
                save_state(os.path.join(ckpt_dir, f"step{state.step:07d}.ckpt"), state, extra_header)
    finally:
        if log_fh is not None:
            log_fh.close()
    if ckpt_dir is not None:
        save_state(os.path.join(ckpt_dir, "last.ckpt"), state, extra_header)
    return state


def _per_graph_align(pred, target, gidx, n_graphs):
    out = np.empty_like(pred)
    for g in range(n_graphs):
        rows = gidx == g
        p = remove_mean(pred[rows])
        out[rows] = p @ _safe_rotation(p, target[rows]).T
    return out


def sample(params, net_cfg: NetworkConfig, molecule, coarse, schedule: DiffusionSchedule, num_samples: int,
           seed, predictor=None) -> list:
    """Generate conformers by iterative deblurring from the coarse prior.

    ``coarse`` is one ``CoarseStructure`` or a sequence of them; sample ``i``
    starts from ``coarse[i % len(coarse)]``. All samples advance together as
    one batched graph. ``predictor(x, t_norm)`` replaces the network when
    given (same stacked-array convention).
    """
    if num_samples < 1:
        return []
    structs = [coarse] if isinstance(coarse, CoarseStructure) else list(coarse)
    if not structs:
        raise ValueError("engine.sample: no coarse structure supplied")
    chosen = [structs[i % len(structs)] for i in range(num_samples)]
    mappings = [build_mapping(c.partition) for c in chosen]
    n = molecule.n_atoms
    rng = np.random.default_rng(seed)
    batch = GraphBatch([molecule] * num_samples, [c.partition for c in chosen], net_cfg,
                       frag_features=[c.frag_features for c in chosen])
    gidx = batch.graph_of_atom.index
    x_init = np.concatenate([remove_mean(mp.lift(c.frag_coords)) for mp, c in zip(mappings, chosen)])
    x = x_init.copy()
    T = schedule.T
    for t in range(T, 0, -1):
        if schedule.delta > 0:
            x = x + np.concatenate([centered_noise(rng, n, schedule.delta) for _ in range(num_samples)])
        if predictor is None:
            pred = net.forward_batch(params, net_cfg, batch, x, np.full(num_samples, t / T)).data
        else:
            pred = np.asarray(predictor(x, t / T), dtype=np.float64)
        pred = _per_graph_align(pred, x_init, gidx, num_samples)
        x = np.concatenate([
            blur(pred[k * n:(k + 1) * n], c, mp, t - 1, T) for k, (c, mp) in enumerate(zip(chosen, mappings))
        ])
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"engine.sample: non-finite state at t={t - 1} for {molecule.id!r}")
    return [x[k * n:(k + 1) * n].copy() for k in range(num_samples)]
