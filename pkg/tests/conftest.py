import numpy as np
import pytest

from attn_asr.data import load_examples, synth_corpus
from attn_asr.model import Seq2Seq, tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return Seq2Seq(tiny_config(6), seed=7)


@pytest.fixture(scope="session")
def copy_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("copy")
    return synth_corpus("copy", 4, (2, 4), {"train": 24, "dev": 6, "test": 5}, 3, out)


@pytest.fixture(scope="session")
def copy_examples(copy_corpus):
    m = copy_corpus.manifest
    return {s: load_examples(m.split(s)) for s in ("train", "dev", "test")}


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line and fail the test if the criterion is not met."""

    def record(number, ok, detail):
        request.config.stash[_VERDICTS].append((number, ok, detail))
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_VERDICTS, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, ok, detail in lines:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
