import numpy as np
import pytest

from mambatrack.synth import SynthConfig, load_sequence, synth_sequence
from mambatrack.train import TrainConfig

TINY_SYNTH = dict(H=48, W=48, T=6, size_min=8.0, size_max=12.0, speed=1.0, seed=7)
TINY_TRAIN = dict(D=16, N=2, K=2, blocks=1, head_hidden=8, patch=16, template_size=32, search_size=64,
                  batch_size=2, steps=3, log_every=0, seed=3)


@pytest.fixture(scope="session")
def tiny_seq_dir(tmp_path_factory):
    return synth_sequence(SynthConfig(**TINY_SYNTH), tmp_path_factory.mktemp("data") / "tiny")


@pytest.fixture
def tiny_seq(tiny_seq_dir):
    return load_sequence(tiny_seq_dir)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(**TINY_TRAIN)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
