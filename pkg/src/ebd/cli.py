"""Command-line entry point: ``ebd <command> [options]``.

Exit codes: 0 success, 1 failed checks, 2 configuration or schema errors,
3 numerical failures.
"""

from __future__ import annotations

import argparse
import os
import platform
import sys
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, _accel
from .coarse import coarse_from_reference, embed_reference, preprocess_molecule, reference_seed, training_pairs
from .config import RunConfig, stage_seed, tomllib
from .engine import ConfigError, sample, train
from .evaluation import corpus_report
from .fragmenting import FragmentVocabulary, build_vocabulary, decompose
from .molio import MoleculeSchemaError, ToyCorpusSpec, build_mapping, generate_toy_corpus, parse_molecules, write_molecules
from .net import NetworkConfig, NumericalError
from .spectral import PROCESSES, trajectory_psd, write_psd_csv

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class CommandError(ConfigError):
    pass


def bundled(name: str) -> Path:
    """Path of a file shipped in ``ebd/data``."""
    return Path(str(resources.files("ebd") / "data" / name))


def version_text() -> str:
    import scipy

    return (
        f"ebd {__version__} (python {platform.python_version()}, numpy {np.__version__}, "
        f"scipy {scipy.__version__}, kernels {_accel.backend()})"
    )


def _repro(cmd: str, cfg: RunConfig) -> None:
    print(f"# ebd {__version__} {cmd} seed={cfg.seed} config={cfg.hash()} kernels={_accel.backend()}", flush=True)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

# flags that belong to one command and shadow a config key elsewhere
_ALIASES = {"eval": {"delta": "delta_cov"}, "sample": {"num": "num_samples"}}


def _config_parent(command: str) -> argparse.ArgumentParser:
    """Every RunConfig key as ``--key``; unset flags leave the config untouched."""
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration overrides")
    g.add_argument("--config", help="flat TOML run configuration")
    aliases = _ALIASES.get(command, {})
    for key in RunConfig.keys():
        if key in aliases:
            continue
        g.add_argument(f"--{key}", dest=f"cfg_{key}", default=None, metavar=RunConfig.field_type(key).__name__.upper())
    for flag, key in aliases.items():
        g.add_argument(f"--{flag}", dest=f"cfg_{key}", default=None, help=f"sets {key}")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebd", description="Equivariant blurring diffusion for conformer generation.")
    parser.add_argument("--version", action="store_true", help="print build metadata and exit")
    sub = parser.add_subparsers(dest="command")

    vocab = sub.add_parser("vocab", help="fragment vocabulary")
    vsub = vocab.add_subparsers(dest="action", required=True)
    vb = vsub.add_parser("build", parents=[_config_parent("vocab")], help="mine a vocabulary from the corpus")
    vb.add_argument("--size", dest="cfg_vocab_size", default=None, help="sets vocab_size")
    vb.add_argument("--out", help="output path (default: the vocab key)")

    data = sub.add_parser("data", help="corpus generation and preprocessing")
    dsub = data.add_subparsers(dest="action", required=True)
    dg = dsub.add_parser("gen-toy", parents=[_config_parent("data")], help="generate the procedural toy corpus")
    dg.add_argument("--spec", dest="cfg_toy_spec", default=None, help="toy spec TOML (default: bundled)")
    dg.add_argument("--out", help="output path (default: the corpus key)")
    dp = dsub.add_parser("preprocess", parents=[_config_parent("data")], help="match and align references")
    dp.add_argument("--out", help="output path (default: overwrite the corpus)")

    tr = sub.add_parser("train", parents=[_config_parent("train")], help="train the deblurring network")
    tr.add_argument("--resume", help="checkpoint to continue from")

    sa = sub.add_parser("sample", parents=[_config_parent("sample")], help="generate conformers")
    sa.add_argument("--ckpt", required=True, help="trained checkpoint")
    sa.add_argument("--out", required=True, help="output molecule JSONL")
    sa.add_argument("--untrained", action="store_true", help="ignore checkpoint weights (zero coordinate heads)")

    ev = sub.add_parser("eval", parents=[_config_parent("eval")], help="coverage and matching report")
    ev.add_argument("--gt", required=True, help="molecule JSONL with ground-truth conformers")
    ev.add_argument("--gen", required=True, help="molecule JSONL with generated_conformers")
    ev.add_argument("--out", required=True, help="report CSV")

    ps = sub.add_parser("psd", parents=[_config_parent("psd")], help="power spectral density along a process")
    ps.add_argument("--process", required=True, choices=PROCESSES)
    ps.add_argument("--mol", required=True, help="molecule id in the corpus")
    ps.add_argument("--out", required=True, help="output CSV")

    ck = sub.add_parser("check", parents=[_config_parent("check")], help="run the invariant suite")
    ck.add_argument("--only", nargs="*", help="run only these named checks")
    ck.add_argument("--list", action="store_true", help="list check names")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    cfg = cfg.override(overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# per-molecule workers (top level so they pickle)
# ---------------------------------------------------------------------------


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _preprocess_job(job):
    mol, refs, seed = job
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = preprocess_molecule(mol, refs, seed)
    return out, [str(w.message) for w in caught]


def molecule_seed(root_seed: int, stage: str, molecule_id: str) -> list:
    """Per-molecule stream independent of worker count and corpus order."""
    return [int(root_seed), zlib.crc32(stage.encode()), zlib.crc32(molecule_id.encode())]


def sample_molecule(params, net_cfg, schedule, vocab, mol, num: int, seed: int):
    """Samples for one molecule, coarse priors from its references (embedded if absent)."""
    part = decompose(mol, vocab)
    refs = list(mol.reference_conformers)
    if not refs:
        k = max(1, len(mol.conformers))
        refs = [embed_reference(mol, reference_seed(seed, mol.id, i)) for i in range(k)]
    coarse = [coarse_from_reference(mol, part, r) for r in refs]
    if num <= 0:
        num = 2 * max(1, len(mol.conformers))
    return sample(params, net_cfg, mol, coarse, schedule, num, molecule_seed(seed, "sample", mol.id))


def _sample_job(job):
    params, net_cfg, schedule, vocab_json, mol, num, seed = job
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return sample_molecule(params, net_cfg, schedule, FragmentVocabulary.from_json(vocab_json), mol, num, seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load_corpus(cfg: RunConfig, key: str = "corpus"):
    return parse_molecules(cfg.require_file(key))


def cmd_vocab_build(args, cfg):
    corpus = _load_corpus(cfg)
    vocab = build_vocabulary(corpus, cfg.vocab_size)
    out = args.out or cfg.vocab
    vocab.save(out)
    note = " (corpus exhausted)" if vocab.exhausted else ""
    print(f"vocab build: {vocab.size} fragments from {len(corpus)} molecules -> {out}{note}")
    return EXIT_OK


def cmd_data_gen_toy(args, cfg):
    path = cfg.require_file("toy_spec") if cfg.toy_spec else bundled("toy_spec.toml")
    try:
        data = tomllib.loads(Path(path).read_text())
        spec = ToyCorpusSpec.from_dict(data)
        spec.validate()
    except (tomllib.TOMLDecodeError, ValueError, TypeError) as exc:
        raise CommandError(f"molio.generate_toy_corpus: {path}: {exc}") from None
    corpus = generate_toy_corpus(spec, cfg.seed)
    out = args.out or cfg.corpus
    write_molecules(corpus, out)
    print(f"data gen-toy: {len(corpus)} molecules -> {out}")
    return EXIT_OK


def cmd_data_preprocess(args, cfg):
    corpus = _load_corpus(cfg)
    jobs = [(m, cfg.refs, cfg.seed) for m in corpus]
    results = _map(_preprocess_job, jobs, cfg.resolved_workers())
    stalled = [msg for _, msgs in results for msg in msgs]
    if stalled:
        print(
            f"warning: coarse.embed_reference: {len(stalled)}/{len(results)} molecules had embeddings stop at the "
            f"iteration cap (first: {stalled[0]})",
            file=sys.stderr,
        )
    out = args.out or cfg.corpus
    write_molecules([m for m, _ in results], out)
    print(f"data preprocess: {len(results)} molecules (refs={cfg.refs}) -> {out}")
    return EXIT_OK


def cmd_train(args, cfg):
    corpus = _load_corpus(cfg)
    vocab = FragmentVocabulary.load(cfg.require_file("vocab"))
    pairs = []
    for mol in corpus:
        if len(mol.reference_conformers) != len(mol.conformers):
            raise CommandError(f"engine.train: molecule {mol.id!r} is not preprocessed; run `ebd data preprocess`")
        pairs.extend(training_pairs(mol, decompose(mol, vocab)))
    os.makedirs(cfg.ckpt_dir, exist_ok=True)
    Path(cfg.log).parent.mkdir(parents=True, exist_ok=True)
    header = {"run_config": cfg.to_dict(), "config_hash": cfg.hash(), "vocab": vocab.to_json(), "version": __version__}
    every = max(1, cfg.steps // 20)

    def progress(step, value):
        if step % every == 0 or step == cfg.steps:
            print(f"step {step:6d}  loss {value:.6f}", flush=True)

    state = train(
        pairs, cfg.network(), cfg.optimizer(), cfg.schedule(), stage_seed(cfg.seed, "train"),
        ckpt_dir=cfg.ckpt_dir, ckpt_every=cfg.ckpt_every, log_path=cfg.log, resume=args.resume,
        extra_header=header, progress=progress,
    )
    if state.flagged:
        print(f"warning: engine.train_step: {len(state.flagged)} steps skipped on non-finite loss", file=sys.stderr)
    print(f"train: {len(pairs)} pairs, {state.step} steps -> {os.path.join(cfg.ckpt_dir, 'last.ckpt')}")
    return EXIT_OK


def load_model(path):
    """(params, NetworkConfig, schedule, vocabulary, RunConfig) stored in a checkpoint."""
    from .engine import load_state

    if not Path(path).is_file():
        raise CommandError(f"config: key 'ckpt' points to a missing file: {path}")
    state, header = load_state(path)
    if "vocab" not in header or "run_config" not in header:
        raise CommandError(f"net.load_checkpoint: {path} lacks the embedded vocabulary or run configuration")
    run_cfg = RunConfig.from_mapping(header["run_config"], str(path))
    net_cfg = NetworkConfig.from_dict(header["config"]["net"])
    return state.params, net_cfg, run_cfg.schedule(), FragmentVocabulary.from_json(header["vocab"]), run_cfg


def cmd_sample(args, cfg):
    from .net import init_params

    params, net_cfg, schedule, vocab, _ = load_model(args.ckpt)
    if args.untrained:
        params = init_params(net_cfg, stage_seed(cfg.seed, "init"))
    corpus = _load_corpus(cfg)
    vj = vocab.to_json()
    jobs = [(params, net_cfg, schedule, vj, m, cfg.num_samples, cfg.seed) for m in corpus]
    generated = _map(_sample_job, jobs, cfg.resolved_workers())
    out = [m.replace(generated_conformers=g) for m, g in zip(corpus, generated)]
    write_molecules(out, args.out)
    print(f"sample: {sum(len(g) for g in generated)} conformers for {len(out)} molecules -> {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg):
    for key, path in (("gt", args.gt), ("gen", args.gen)):
        if not Path(path).is_file():
            raise CommandError(f"config: key {key!r} points to a missing file: {path}")
    gt = parse_molecules(args.gt)
    gen = {m.id: m.generated_conformers for m in parse_molecules(args.gen)}
    missing = [m.id for m in gt if m.id not in gen]
    if missing:
        raise CommandError(f"eval.corpus_report: {len(missing)} molecules missing from {args.gen}: {missing[:5]}")
    rep = corpus_report(gt, cfg.delta_cov, generated=gen, heavy_only=cfg.heavy_only)
    values = np.array(rep.rows)
    if not np.all(np.isfinite(values)):
        raise NumericalError("eval.corpus_report: non-finite metric values")
    rep.write_csv(args.out)
    s = rep.summary()
    print(
        f"eval: {len(rep.rows)} molecules, delta_cov={cfg.delta_cov}  "
        f"COV-R {s['cov_r_mean']:.4f}/{s['cov_r_median']:.4f}  MAT-R {s['mat_r_mean']:.4f}/{s['mat_r_median']:.4f}  "
        f"COV-P {s['cov_p_mean']:.4f}/{s['cov_p_median']:.4f}  MAT-P {s['mat_p_mean']:.4f}/{s['mat_p_median']:.4f}  "
        f"(mean/median) -> {args.out}"
    )
    return EXIT_OK


def cmd_psd(args, cfg):
    from .coarse import CoarseStructure
    from .fragmenting import fragment_features
    from .geometry import remove_mean

    corpus = {m.id: m for m in _load_corpus(cfg)}
    if args.mol not in corpus:
        raise CommandError(f"spectral.trajectory_psd: molecule {args.mol!r} not in {cfg.corpus}")
    mol = corpus[args.mol]
    if not len(mol.conformers):
        raise CommandError(f"spectral.trajectory_psd: molecule {args.mol!r} has no conformers")
    x0 = remove_mean(mol.conformers[0])
    coarse = None
    if args.process == "blurring":
        part = decompose(mol, FragmentVocabulary.load(cfg.require_file("vocab")))
        if len(mol.reference_conformers):
            coarse = coarse_from_reference(mol, part, mol.reference_conformers[0])
        else:
            coarse = CoarseStructure(build_mapping(part).centroids(x0), fragment_features(mol, part), part)
    table = trajectory_psd(args.process, mol, x0, coarse, cfg.schedule(), seed=molecule_seed(cfg.seed, "psd", mol.id))
    write_psd_csv(table, args.out)
    print(f"psd: {args.process} for {mol.id}, {table.shape[0]} steps x {table.shape[1]} modes -> {args.out}")
    return EXIT_OK


def cmd_check(args, cfg):
    from . import checks

    if args.list:
        print("\n".join(checks.names()))
        return EXIT_OK
    unknown = sorted(set(args.only or ()) - set(checks.names()))
    if unknown:
        raise CommandError(f"check: unknown check names {unknown}")
    results = checks.run_checks(args.only, stream=sys.stdout)
    failed = [r.name for r in results if not r.ok]
    print(f"check: {len(results) - len(failed)}/{len(results)} passed")
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {
    ("vocab", "build"): cmd_vocab_build,
    ("data", "gen-toy"): cmd_data_gen_toy,
    ("data", "preprocess"): cmd_data_preprocess,
    ("train", None): cmd_train,
    ("sample", None): cmd_sample,
    ("eval", None): cmd_eval,
    ("psd", None): cmd_psd,
    ("check", None): cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        print(version_text())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    name = " ".join(x for x in (args.command, getattr(args, "action", None)) if x)
    try:
        cfg = resolve_config(args)
        _repro(name, cfg)
        return COMMANDS[(args.command, getattr(args, "action", None))](args, cfg)
    except NumericalError as exc:
        print(f"ebd {name}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, MoleculeSchemaError, FileNotFoundError, ValueError) as exc:
        print(f"ebd {name}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
