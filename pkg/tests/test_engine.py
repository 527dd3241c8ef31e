import csv
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ebd.coarse import preprocess_molecule, sampler_frame, training_pairs
from ebd.diffusion import DiffusionSchedule, blur
from ebd.engine import (
    ConfigError,
    OptimizerConfig,
    ResumeMismatchError,
    TrainState,
    adamw_update,
    loss,
    sample,
    train,
    train_step,
)
from ebd.fragmenting import decompose
from ebd.geometry import aligned_rmsd, kabsch, random_rotation, remove_mean
from ebd.molio import Partition, ToyCorpusSpec, build_mapping, generate_toy_corpus
from ebd.net import NetworkConfig, forward, init_params

seeds = st.integers(0, 2**31)
TINY = NetworkConfig(layers=1, width=8, time_dim=4)


@pytest.fixture(scope="module")
def chain6(vocab12):
    spec = ToyCorpusSpec(count=1, min_atoms=6, max_atoms=6, conformers=1, topology_weights={"chain": 1.0},
                         id_prefix="smoke")
    (mol,) = generate_toy_corpus(spec, 7)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mol = preprocess_molecule(mol, "embed", 0)
    (pair,) = training_pairs(mol, decompose(mol, vocab12))
    return mol, pair


@pytest.fixture(scope="module")
def corpus_pairs(small_corpus, vocab12):
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for mol in small_corpus[:4]:
            mol = preprocess_molecule(mol, "embed", 0)
            out.extend(training_pairs(mol, decompose(mol, vocab12)))
    return out


def test_loss_zero_cases(rng):
    x0 = remove_mean(rng.normal(size=(5, 3)))
    assert loss(x0, x0) < 1e-28
    assert loss(x0, x0 @ random_rotation(rng).T) < 1e-9


def test_loss_hand_case():
    # collinear along x; one atom pushed by a, recentred: residual (2a/3, -a/3, -a/3) on the x column
    a = 0.3
    x0 = np.array([[-1.0, 0, 0], [0, 0, 0], [1, 0, 0]])
    pred = x0 + np.array([[2 * a / 3, 0, 0], [-a / 3, 0, 0], [-a / 3, 0, 0]])
    assert loss(x0, pred) == pytest.approx(2 * a * a / 27, abs=1e-15)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        loss(np.zeros((3, 3)), np.zeros((4, 3)))


@given(seeds)
def test_loss_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    x0, pred = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    ref = loss(remove_mean(x0), remove_mean(pred))
    a = remove_mean(x0 @ random_rotation(rng).T + rng.normal(size=3))
    b = remove_mean(pred @ random_rotation(rng).T + rng.normal(size=3))
    assert abs(loss(a, b) - ref) < 1e-8
    # the optimal rotation is what the loss uses
    R = kabsch(remove_mean(pred), remove_mean(x0))
    assert ref == pytest.approx(np.mean((remove_mean(x0) - remove_mean(pred) @ R.T) ** 2), abs=1e-14)


def test_adamw_matches_hand_formula(rng):
    theta = rng.normal(size=4)
    g1, g2 = rng.normal(size=4), rng.normal(size=4)
    opt = OptimizerConfig(lr=0.1, weight_decay=0.01)
    st_ = TrainState.fresh({"w": theta}, 0)
    adamw_update(st_, {"w": g1}, opt)
    adamw_update(st_, {"w": g2}, opt)
    b1, b2, eps, lam, lr = 0.9, 0.999, 1e-8, 0.01, 0.1
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1**2
    th1 = theta - lr * (m1 / (1 - b1) / (np.sqrt(v1 / (1 - b2)) + eps) + lam * theta)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2**2
    th2 = th1 - lr * (m2 / (1 - b1**2) / (np.sqrt(v2 / (1 - b2**2)) + eps) + lam * th1)
    np.testing.assert_allclose(st_.params["w"], th2, atol=1e-14)
    assert st_.step == 2


def test_zero_gradient_without_decay_is_noop(rng):
    theta = rng.normal(size=(3, 2))
    st_ = TrainState.fresh({"w": theta}, 0)
    adamw_update(st_, {"w": np.zeros_like(theta)}, OptimizerConfig(weight_decay=0.0))
    np.testing.assert_array_equal(st_.params["w"], theta)


def test_optimizer_validation():
    for bad in ({"beta1": 1.0}, {"lr": -1}, {"eps": 0}, {"batch_size": 0}):
        with pytest.raises(ConfigError):
            OptimizerConfig(**bad)


def test_zero_lr_leaves_params(chain6):
    _, pair = chain6
    params = init_params(TINY, 0)
    st_ = TrainState.fresh(params, 0)
    st_, value = train_step(st_, [pair], DiffusionSchedule(), TINY, OptimizerConfig(lr=0.0, weight_decay=0.0))
    assert np.isfinite(value)
    assert all(np.array_equal(st_.params[k], params[k]) for k in params)


def test_train_deterministic(corpus_pairs):
    opt = OptimizerConfig(lr=1e-3, batch_size=3, steps=5)
    runs = []
    for _ in range(2):
        losses = []
        train(corpus_pairs, TINY, opt, DiffusionSchedule(), 11, progress=lambda s, v: losses.append(v))
        runs.append(losses)
    assert runs[0] == runs[1]
    assert len(runs[0]) == 5


def _log(path):
    with open(path) as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


def test_resume_reproduces_next_losses(corpus_pairs, tmp_path):
    opt = OptimizerConfig(lr=1e-3, batch_size=3, steps=6)
    full, part = tmp_path / "full", tmp_path / "part"
    full.mkdir()
    part.mkdir()
    train(corpus_pairs, TINY, opt, DiffusionSchedule(), 5, ckpt_dir=full, log_path=full / "log.csv")
    train(corpus_pairs, TINY, OptimizerConfig(lr=1e-3, batch_size=3, steps=3), DiffusionSchedule(), 5,
          ckpt_dir=part, ckpt_every=3, log_path=part / "log.csv")
    train(corpus_pairs, TINY, opt, DiffusionSchedule(), 5, ckpt_dir=part, log_path=part / "log.csv",
          resume=part / "step0000003.ckpt")
    assert _log(full / "log.csv") == _log(part / "log.csv")
    with pytest.raises(ResumeMismatchError):
        train(corpus_pairs, TINY, OptimizerConfig(lr=2e-3, batch_size=3, steps=6), DiffusionSchedule(), 5,
              resume=part / "step0000003.ckpt")


def test_empty_corpus():
    with pytest.raises(ConfigError):
        train([], TINY, OptimizerConfig(), DiffusionSchedule(), 0)


def test_oracle_sampler_recovers_x0(chain6):
    mol, pair = chain6
    n = mol.n_atoms
    x0 = sampler_frame(pair.x0, pair.coarse)
    for T in (1, 7, 50):
        out = sample(None, TINY, mol, pair.coarse, DiffusionSchedule(T=T), 3, 0,
                     predictor=lambda x, t: np.tile(x0, (len(x) // n, 1)))
        assert max(aligned_rmsd(o, x0) for o in out) < 1e-6
        assert max(np.abs(o - x0).max() for o in out) < 1e-6


def test_coarse_fixed_point(chain6):
    mol, pair = chain6
    n = mol.n_atoms
    lifted = build_mapping(pair.coarse.partition).lift(pair.coarse.frag_coords)
    seen = []

    def stub(x, t):
        seen.append(x.copy())
        return np.tile(lifted, (len(x) // n, 1))

    (out,) = sample(None, TINY, mol, pair.coarse, DiffusionSchedule(T=10, delta=0.0), 1, 0, predictor=stub)
    for x in seen + [out]:
        np.testing.assert_allclose(x, lifted, atol=1e-12)


def test_single_step_collapse(chain6, rng):
    mol, pair = chain6
    params = {k: v + rng.normal(size=v.shape) * 0.1 for k, v in init_params(TINY, 0).items()}
    sched = DiffusionSchedule(T=1, delta=0.0)
    (out,) = sample(params, TINY, mol, pair.coarse, sched, 1, 0)
    x_init = remove_mean(build_mapping(pair.coarse.partition).lift(pair.coarse.frag_coords))
    pred = remove_mean(forward(params, TINY, mol, pair.coarse.partition, x_init, 1.0))
    np.testing.assert_allclose(out, pred @ kabsch(pred, x_init).T, atol=1e-10)


def test_sample_deterministic_and_finite(chain6):
    mol, pair = chain6
    params = init_params(TINY, 0)
    a = sample(params, TINY, mol, pair.coarse, DiffusionSchedule(T=5), 2, 3)
    b = sample(params, TINY, mol, pair.coarse, DiffusionSchedule(T=5), 2, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert sample(params, TINY, mol, pair.coarse, DiffusionSchedule(T=5), 0, 3) == []


@given(seeds, st.integers(1, 50))
def test_reparameterised_residual_identity(seed, T):
    rng = np.random.default_rng(seed)
    n, m = 5, 2
    mp = build_mapping(Partition.from_assignment([0, 0, 1, 1, 1]))
    x0, f, xf = rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    t = int(rng.integers(1, T + 1))
    s = (t - 1) / T
    mu = (1 - s) * f + s * mp.lift(xf)
    lhs = np.sum((blur(x0, xf, mp, t - 1, T) - mu) ** 2)
    assert lhs == pytest.approx((1 - s) ** 2 * np.sum((x0 - f) ** 2), abs=1e-10)


def test_smoke_overfit_single_molecule(chain6):
    """Regression baseline: 200 steps on one 6-atom chain."""
    _, pair = chain6
    cfg = NetworkConfig(layers=2, width=64, time_dim=8)
    losses = []
    train([pair] * 16, cfg, OptimizerConfig(lr=3e-3, batch_size=16, steps=200), DiffusionSchedule(), 0,
          progress=lambda s, v: losses.append(v))
    early, late = np.mean(losses[5:15]), np.mean(losses[190:200])
    assert early / late >= 10.0, (early, late)
