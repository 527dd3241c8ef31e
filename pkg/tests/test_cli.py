import csv
import json

import numpy as np
import pytest

from ebd import __version__
from ebd.cli import EXIT_CHECK, EXIT_CONFIG, bundled, main
from ebd.config import RunConfig, stage_seed
from ebd.engine import ConfigError
from ebd.molio import ToyCorpusSpec, parse_molecules

FAST = ["--workers", "1", "--layers", "1", "--width", "8", "--time_dim", "4", "--steps", "3",
        "--batch_size", "2", "--ckpt_every", "0", "--T", "4"]


def test_config_hash_stable_across_key_order(tmp_path):
    a, b = tmp_path / "a.toml", tmp_path / "b.toml"
    a.write_text("T = 10\nlr = 0.001\nseed = 3\n")
    b.write_text("seed = 3\nlr = 0.001\nT = 10\n")
    assert RunConfig.load(a).hash() == RunConfig.load(b).hash()
    assert RunConfig.load(a).hash() != RunConfig().hash()


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("nope = 1\n")
    with pytest.raises(ConfigError, match="nope"):
        RunConfig.load(bad)
    bad.write_text("T = 'x'\n")
    with pytest.raises(ConfigError, match="'T'"):
        RunConfig.load(bad)
    bad.write_text("[table]\nT = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
    with pytest.raises(ConfigError, match="'refs'"):
        RunConfig(refs="x").validate()
    with pytest.raises(ConfigError):
        RunConfig(T=0).validate()
    assert RunConfig(workers=3).resolved_workers() == 3 and RunConfig().resolved_workers() >= 1


def test_bundled_files():
    desk = RunConfig.load(bundled("desk.toml"))
    desk.validate()
    assert (desk.T, desk.sigma, desk.delta, desk.lr, desk.steps, desk.vocab_size) == (50, 0.01, 0.0125, 1e-4, 2000, 12)
    from ebd.config import tomllib

    assert ToyCorpusSpec.from_dict(tomllib.loads(bundled("toy_spec.toml").read_text())) == ToyCorpusSpec()


def test_stage_seeds_differ():
    assert stage_seed(0, "train") != stage_seed(0, "init")
    assert stage_seed(0, "train") == stage_seed(0, "train")


def test_version(capsys):
    assert main(["--version"]) == 0
    out = capsys.readouterr().out
    assert out.startswith(f"ebd {__version__}") and "kernels" in out


def test_train_missing_corpus_exit_2(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["train", "--corpus", "missing.jsonl"]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "'corpus'" in err and "missing.jsonl" in err


def test_bad_config_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("width = 'wide'\n")
    assert main(["check", "--list", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["eval", "--gt", "a", "--gen", "b", "--out", "c", "--delta", "-1"]) == EXIT_CONFIG


def test_check_suite(capsys):
    assert main(["check", "--list"]) == 0
    names = capsys.readouterr().out.split("\n")[1:]
    names = [n for n in names if n]
    assert len(names) >= 25
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert f"{len(names)}/{len(names)} passed" in out
    assert main(["check", "--only", "no_such_check"]) == EXIT_CONFIG


def test_check_failure_exit_1(monkeypatch):
    from ebd import checks

    monkeypatch.setattr(checks, "_REGISTRY", [*checks._REGISTRY, ("always_fails", lambda: (False, "forced"))])
    assert main(["check", "--only", "always_fails"]) == EXIT_CHECK


@pytest.fixture
def pipeline(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    spec = tmp_path / "spec.toml"
    spec.write_text(bundled("toy_spec.toml").read_text().replace("count = 50", "count = 4"))
    assert main(["data", "gen-toy", "--spec", str(spec), "--seed", "0", "--workers", "1"]) == 0
    assert main(["data", "preprocess", "--seed", "0", "--workers", "1"]) == 0
    assert main(["vocab", "build", "--size", "12", "--workers", "1"]) == 0
    assert main(["train", "--seed", "0", *FAST]) == 0
    return tmp_path


def test_pipeline_repro_and_artifacts(pipeline, capsys):
    assert main(["sample", "--ckpt", "runs/ckpt/last.ckpt", "--seed", "2", "--out", "a.jsonl", *FAST]) == 0
    assert main(["sample", "--ckpt", "runs/ckpt/last.ckpt", "--seed", "2", "--out", "b.jsonl", *FAST]) == 0
    assert (pipeline / "a.jsonl").read_bytes() == (pipeline / "b.jsonl").read_bytes()
    mols = parse_molecules("a.jsonl")
    assert all(len(m.generated_conformers) == 2 * len(m.conformers) for m in mols)
    assert main(["eval", "--gt", "data/corpus.jsonl", "--gen", "a.jsonl", "--delta", "1.25", "--out", "r.csv"]) == 0
    rows = list(csv.DictReader(open("r.csv")))
    assert [r["mol_id"] for r in rows][-2:] == ["mean", "median"]
    assert all(np.isfinite(float(r[k])) for r in rows for k in ("cov_r", "mat_r", "cov_p", "mat_p"))
    assert main(["psd", "--process", "blurring", "--mol", mols[0].id, "--out", "p.csv"]) == 0
    header = next(csv.reader(open("p.csv")))
    assert header[0] == "t" and len(header) == mols[0].n_atoms + 1
    out = capsys.readouterr().out
    repro = [line for line in out.splitlines() if line.startswith("# ebd")]
    assert len(repro) >= 4 and all("seed=" in r and "config=" in r for r in repro)
    log = list(csv.reader(open("runs/train_log.csv")))
    assert log[0] == ["step", "loss", "seconds"] and len(log) == 4


def test_pipeline_errors(pipeline):
    assert main(["psd", "--process", "heat", "--mol", "nope", "--out", "p.csv"]) == EXIT_CONFIG
    assert main(["sample", "--ckpt", "missing.ckpt", "--out", "x.jsonl"]) == EXIT_CONFIG
    assert main(["train", "--seed", "0", *FAST, "--lr", "0.5", "--resume", "runs/ckpt/last.ckpt"]) == EXIT_CONFIG
    raw = json.loads(open("data/corpus.jsonl").readline())
    raw["conformers"] = raw["conformers"][:1]
    open("gt1.jsonl", "w").write(json.dumps({**raw, "bonds": [[0, 99, 0]]}) + "\n")
    assert main(["eval", "--gt", "gt1.jsonl", "--gen", "data/corpus.jsonl", "--out", "r.csv"]) == EXIT_CONFIG
