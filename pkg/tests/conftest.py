import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ebd.fragmenting import build_vocabulary
from ebd.molio import MoleculeRecord, ToyCorpusSpec, generate_toy_corpus

settings.register_profile(
    "ebd", deadline=None, max_examples=int(os.environ.get("EBD_HYPOTHESIS_EXAMPLES", "40")),
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ebd")


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_toy_corpus(ToyCorpusSpec(), 0)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_toy_corpus(ToyCorpusSpec(count=8), 1)


@pytest.fixture(scope="session")
def vocab12(toy_corpus):
    return build_vocabulary(toy_corpus, 12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def chain(n, elements=None, conformers=()):
    elements = elements or ["C"] * n
    return MoleculeRecord(
        f"chain{n}", [(e, 1) for e in elements], [(i, i + 1, 0) for i in range(n - 1)], conformers
    )


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


ACCEPTANCE = {}
N_CRITERIA = 13


@pytest.fixture
def criterion():
    """Record (ok, detail) for an acceptance criterion; printed in the terminal summary."""

    def record(k, ok, detail):
        ACCEPTANCE[k] = (bool(ok), detail)
        print(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        if k in ACCEPTANCE:
            ok, detail = ACCEPTANCE[k]
            terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {k:2d}: NOT RUN (deselected or errored before reporting)")
