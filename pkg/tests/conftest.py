import numpy as np
import pytest

from hiresvdd.dsp import StftConfig
from hiresvdd.expert import ExpertConfig, FeatureBank
from hiresvdd.synthdata import SynthConfig, build_corpus

TINY_STFT = StftConfig(512, 512)
TINY_SECONDS = 0.5


def tiny_config(band=(0.0, 22050.0), seed=0, **kw) -> ExpertConfig:
    """A small backbone that trains in well under a second per epoch on the tiny corpus."""
    kw.setdefault("channels", (4, 8))
    kw.setdefault("strides", (2, 2))
    kw.setdefault("embed_dim", 8)
    return ExpertConfig(band=band, seed=seed, stft=TINY_STFT, target_seconds=TINY_SECONDS, **kw)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    cfg = SynthConfig(seed=5, n_bonafide=10, n_deepfake=10, duration=TINY_SECONDS, n_harmonics=12)
    return build_corpus(cfg, out)


@pytest.fixture(scope="session")
def tiny_bank(tiny_corpus):
    bank = FeatureBank(TINY_STFT, TINY_SECONDS)
    bank.add(tiny_corpus)
    return bank


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
